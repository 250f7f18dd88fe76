"""
Cleaning a corpus, then probing long context
============================================
"""
import numpy as np

from gigamoe.data import (Document, exact_dedup, jaccard_estimate, minhash_dedup, minhash_signature,
                          oracle_answer, passkey_generate, passkey_score, true_jaccard)

rng = np.random.default_rng(0)
letters = np.array(list("abcdefghijklmnopqrstuvwxyz "))
base = "".join(rng.choice(letters, 400))
edited = base[:200] + "xyz" + base[203:]
other = "".join(rng.choice(letters, 400))

print("true Jaccard  ", round(true_jaccard(base, edited), 3))
print("MinHash guess ", jaccard_estimate(minhash_signature(base), minhash_signature(edited)))

docs = [Document("1", base), Document("2", base + "  \n"), Document("3", edited),
        Document("4", other)]
print("\nexact dedup keeps", [d.id for d in exact_dedup(docs)])
res = minhash_dedup(docs, threshold=0.8)
print("minhash keeps   ", [d.id for d in res.survivors])
for line in res.report_lines():
    print("  cluster", line)

# A key buried in filler; the cheating oracle just copies it back out
sample = passkey_generate(512, "41732", seed=3)
print(f"\npasskey doc: {sample.n_tokens} tokens, key near {sample.position_fraction:.0%}")
print(sample.document[:120] + " ...")
answer = oracle_answer(sample.document)
print("oracle says:", answer, "->", passkey_score(answer, sample.key))
