"""
Characters per token
====================

Train two byte-level BPE vocabularies on different text and score them on
several domains. Higher is better: fewer tokens for the same text.
"""
from gigamoe.tokenizer import ComparisonTable, DomainCorpus, byte_vocab, compare_tokenizers, train_bpe

code = [b"def f(x):\n    return x * 2\n", b"for i in range(10):\n    print(i)\n"] * 20
prose = [b"The quick brown fox jumps over the lazy dog. ",
         "Съешь же ещё этих мягких французских булок.".encode()] * 20

vocabs = {
    "code-bpe": train_bpe(code, 320),
    "prose-bpe": train_bpe(prose, 320, whitespace_split=True),
    "bytes": byte_vocab(),
}
corpora = [DomainCorpus("code", code[:2]), DomainCorpus("prose", prose[:2])]
print(compare_tokenizers(vocabs, corpora).to_text())

# Mean scores are the plain average over domains
table = ComparisonTable.from_ratios(
    [f"d{i}" for i in range(7)],
    {"giga_tokenizer_1": (3.57, 4.15, 4.62, 3.61, 4.18, 3.34, 4.47),
     "gpt-4o": (3.74, 4.43, 4.88, 3.39, 3.40, 3.07, 4.68)})
print()
print(table.to_text())
