from .corpus import Document, document_line, load_documents
from .dedup import (DedupResult, DuplicateCluster, MinHashSignature, content_hash, exact_dedup,
                    jaccard_estimate, minhash_dedup, minhash_signature, normalize_text, shingles,
                    true_jaccard)
from .passkey import (QUESTION, PassKeySample, generate_suite, key_sentence, oracle_answer,
                      passkey_generate, passkey_score, read_suite, score_suite, write_oracle_outputs,
                      write_suite)
