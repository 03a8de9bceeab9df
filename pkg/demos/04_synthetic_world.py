"""The bilingual toy world: cipher translation and the rule teacher.

The target language is a bijective word cipher over the source lexicon,
so every translation has exactly one right answer, and the teacher
answers four query families deterministically (refusing anything
carrying a harmful marker word).
"""
from langlift import world as wd

spec = wd.build_language_spec(seed=3, n_words=60)

# %% the cipher is a bijection with disjoint surfaces
sample = list(spec.cipher.items())[:6]
for en, x in sample:
    print(f"  {en:12s} <-> {x}")

sentence = f"say {spec.content_words[0]} {spec.content_words[1]}"
x_sentence = wd.oracle_translate(spec, sentence, "en->x")
print("\nround trip:", sentence, "->", x_sentence, "->",
      wd.oracle_translate(spec, x_sentence, "x->en"))

# %% the teacher's four task families
teacher = wd.TeacherOracle(spec)
w = spec.content_words
key = sorted(spec.kv_table)[0]
for q in (f"say {w[0]} {w[1]}", f"flip {w[0]} {w[1]} {w[2]}", "add 3 4", f"what {key}"):
    print(f"  {q!r:40s} -> {teacher.answer(q)!r}")

# %% harmful markers always trigger the fixed refusal
marker = spec.harmful_markers[0]
print(f"\nharmful query 'say {marker}':", repr(teacher.answer(f"say {marker}")))
print("refusal sentence:", repr(spec.refusal))

# %% deterministic corpora and query sets
queries = wd.gen_query_set(spec, 10, harmful_fraction=0.2, seed=5)
for q in queries[:5]:
    print(f"  harmful={q.harmful}  {q.text}")
pairs = wd.gen_corpus(spec, "parallel", 3, seed=6)
print("\nparallel pairs satisfy the oracle:",
      all(wd.oracle_translate(spec, p.en, "en->x") == p.x for p in pairs))
