"""The four training-data formats, decoded token by token.

Translation pre-training interleaves two-direction cipher instances
with source-language replay documents; recovery records put the teacher
answer behind ⟨response⟩; chain records walk ⟨EN⟩ query ⟨response⟩
answer ⟨X⟩ translated answer; translation instructions open with the
produced language's ID token.
"""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from conftest import build_toy_world

from langlift import datapipe as dp
from langlift import world as wd

toy = build_toy_world(seed=5, n_words=40, n_mono=150, n_pairs=20)
vocab = toy.vocab
queries = wd.gen_query_set(toy.spec, 4, harmful_fraction=0.25, seed=1)


def show(ids, label):
    print(f"{label}:")
    print("  " + " | ".join(vocab.id_to_token[i] for i in ids))


# %% translation pre-training: both directions, replay doc in front
tcpt = dp.build_translation_cpt(toy.pairs[:1], toy.en_mono[:1], vocab, seed=0)
for r in tcpt:
    show(r.ids, f"translation-cpt [{r.direction}]")

# %% recovery records: template-wrapped query, sentinel-led teacher answer
rkd = dp.build_rkd(queries, toy.teacher, vocab)
r = rkd[0]
print(f"\nquery: {r.q_en!r}  answer: {r.a_en!r}")
show(r.target_ids, "recovery target")

# %% chain records translate the recovery data into the target language
tcot = dp.build_tcot(rkd, toy.translate, vocab)
show(tcot[0].target_ids, "\nchain target")

# %% translation instructions
sft = dp.build_translation_sft(["put this in the other tongue: {src}"],
                               toy.pairs[:1], vocab)
for r in sft:
    show(r.target_ids, f"translation instruction [{r.meta['direction']}]")

# %% packing: instruction records pad per batch, masks cover targets only
packed = dp.pack_and_mix(rkd, pad_id=vocab.pad_id, seed=0, kind="transform-sft",
                         max_len=128, batch_size=4)
ex = packed.examples[0]
print(f"\npacked example: {len(ex.ids)} tokens, {ex.n_target} target positions")
print("mask over the tail:", ex.loss_mask[-10:].tolist())
