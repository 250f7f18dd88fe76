from .bench import ComparisonTable, DomainCorpus, chars_per_token, compare_tokenizers, count_chars
from .bpe import BPEVocab, byte_vocab, split_chunks, train_bpe
