import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from langlift import tokenizer as tok
from langlift import world as wd
from langlift.inference import DEFAULT_SYSTEM_PROMPT, TEMPLATE_CHARS, nlt_segments


@dataclass
class ToyWorld:
    spec: wd.ToyLanguageSpec
    teacher: wd.TeacherOracle
    base_vocab: tok.Vocabulary   # source-language vocab with ⟨EOS⟩/⟨PAD⟩
    vocab: tok.Vocabulary        # extended with target tokens and ⟨EN⟩/⟨X⟩/⟨response⟩
    en_mono: list[str]
    x_mono: list[str]
    pairs: list[wd.ParallelPair]

    def translate(self, s: str) -> str:
        return wd.oracle_translate(self.spec, s, "en->x")


def build_toy_world(seed=11, n_words=60, en_vocab_size=220, x_vocab_size=150,
                    n_mono=300, n_pairs=80) -> ToyWorld:
    spec = wd.build_language_spec(seed=seed, n_words=n_words)
    en_mono = wd.gen_corpus(spec, "mono-en", n_mono, seed=seed + 1)
    x_mono = wd.gen_corpus(spec, "mono-x", n_mono, seed=seed + 2)
    pairs = wd.gen_corpus(spec, "parallel", n_pairs, seed=seed + 3)

    # format strings ride along so the learner compresses them
    format_lines = [
        f"<s>[INST] <<SYS>>\n{DEFAULT_SYSTEM_PROMPT}\n<</SYS>>\n\n",
        " [/INST] ", " </s><s>[INST] ",
        "".join(nlt_segments("X")),
    ] * 20
    v_en = tok.learn_vocab(en_mono + format_lines, en_vocab_size, alphabet=TEMPLATE_CHARS)
    base_vocab = tok.merge_vocab(v_en, tok.Vocabulary([], []), [tok.EOS, tok.PAD, tok.RESPONSE])
    v_x = tok.learn_vocab(x_mono, x_vocab_size)
    vocab = tok.merge_vocab(base_vocab, v_x,
                            [tok.EN, tok.lang_token(spec.language)])
    return ToyWorld(
        spec=spec, teacher=wd.TeacherOracle(spec),
        base_vocab=base_vocab, vocab=vocab,
        en_mono=en_mono, x_mono=x_mono, pairs=pairs,
    )


@pytest.fixture(scope="session")
def toy() -> ToyWorld:
    return build_toy_world()
