"""Chat-template rendering, greedy decoding, and structured-output parsing.

The prompt format is the bracketed instruction style of the source chat
model: a system block inside the first instruction, every past turn
closed with a sequence terminator, and the pending query left open. The
history is plain text with no reserved tokens. Model outputs are routed
structurally: whichever reserved token appears first tells the caller
whether this is a direct source-language answer, a translation, or a
full translation chain-of-thought.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .model import ModelBundle, SequenceLengthError, forward
from .tokenizer import EN, EOS, RESPONSE, Vocabulary, lang_token

DEFAULT_SYSTEM_PROMPT = "You are a helpful assistant."

# characters the chat template and fine-tuning targets may introduce on
# top of the corpus alphabet; the vocabulary learner is fed these
TEMPLATE_CHARS = sorted(set(
    "<s>[INST]/ \n"
    "abcdefghijklmnopqrstuvwxyz"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "0123456789.:,!?'-"
))


class InferenceError(ValueError):
    pass


class ParseError(InferenceError):
    def __init__(self, message: str, positions=None):
        super().__init__(message)
        self.positions = list(positions or [])


@dataclass
class ConversationHistory:
    """Past (query, answer) turns in the source language plus the
    pending query; never contains reserved tokens."""

    turns: list[tuple[str, str]] = field(default_factory=list)
    pending: str = ""


def render_template_text(history: ConversationHistory,
                         system_prompt: str = DEFAULT_SYSTEM_PROMPT) -> str:
    """Exact prompt bytes for a conversation state.

    <s>[INST] <<SYS>>\\n{system}\\n<</SYS>>\\n\\n{q1} [/INST] {a1} </s>
    <s>[INST] {q2} [/INST] ...  (terminator and next opener are adjacent)
    """
    if not history.pending:
        raise InferenceError("pending query must be non-empty")
    first_prefix = f"<s>[INST] <<SYS>>\n{system_prompt}\n<</SYS>>\n\n"
    parts = []
    for i, (q, a) in enumerate(history.turns):
        prefix = first_prefix if i == 0 else "<s>[INST] "
        parts.append(f"{prefix}{q} [/INST] {a} </s>")
    prefix = first_prefix if not history.turns else "<s>[INST] "
    parts.append(f"{prefix}{history.pending} [/INST]")
    return "".join(parts)


def render_template(history: ConversationHistory, vocab: Vocabulary,
                    system_prompt: str = DEFAULT_SYSTEM_PROMPT) -> list[int]:
    return vocab.encode(render_template_text(history, system_prompt))


def greedy_decode(bundle: ModelBundle, prompt_ids: list[int], max_new: int,
                  eos_id: int | None = None) -> list[int]:
    """Argmax decoding; ties break to the lowest token id (np.argmax
    picks the first maximum); stops after emitting eos_id or max_new
    tokens. No sampling anywhere."""
    max_len = bundle.config.max_seq_len
    if len(prompt_ids) >= max_len:
        raise SequenceLengthError(
            f"prompt of {len(prompt_ids)} tokens leaves no room in context {max_len}")
    ids = list(prompt_ids)
    out: list[int] = []
    for _ in range(max_new):
        result = forward(ids, bundle.weights, bundle.adapters)
        nxt = int(np.argmax(result.logits.data[-1]))
        out.append(nxt)
        ids.append(nxt)
        if nxt == eos_id or len(ids) >= max_len:
            break
    return out


@dataclass
class TcotParse:
    """Structured view of one model output.

    mode "tcot": reserved tokens appeared in the order ⟨EN⟩, ⟨response⟩,
    ⟨X⟩ and all three text fields are present. mode "en-direct": output
    began with ⟨response⟩. mode "translation": a single language token
    followed by text.
    """

    mode: str
    q_en: list[int] | None = None
    a_en: list[int] | None = None
    a_x: list[int] | None = None
    language: str | None = None


def parse_tcot(output_ids: list[int], vocab: Vocabulary,
               language: str = "X") -> TcotParse:
    """Split an output on its reserved tokens; malformed order is an
    error carrying the offending positions, never silently repaired.
    Reserved tokens the vocabulary does not define simply never occur
    (a pre-transfer vocabulary has no language-ID tokens)."""
    x_tok = lang_token(language)
    wanted = {vocab.specials[s]: s for s in (EN, RESPONSE, x_tok)
              if s in vocab.specials}
    eos_id = vocab.eos_id

    ids = list(output_ids)
    if eos_id in ids:
        ids = ids[:ids.index(eos_id)]
    marks = [(pos, wanted[i]) for pos, i in enumerate(ids) if i in wanted]
    names = [name for _, name in marks]
    positions = [pos for pos, _ in marks]

    if names == [EN, RESPONSE, x_tok]:
        if positions[0] != 0:
            raise ParseError("translation chain output must start with ⟨EN⟩", positions)
        return TcotParse(
            mode="tcot",
            q_en=ids[1:positions[1]],
            a_en=ids[positions[1] + 1:positions[2]],
            a_x=ids[positions[2] + 1:],
            language=language,
        )
    if names == [RESPONSE] and positions[0] == 0:
        return TcotParse(mode="en-direct", a_en=ids[1:])
    if len(names) == 1 and positions[0] == 0 and names[0] in (EN, x_tok):
        field_name = "a_en" if names[0] == EN else "a_x"
        parse = TcotParse(mode="translation", language=names[0].strip("⟨⟩"))
        setattr(parse, field_name, ids[1:])
        return parse
    missing = [t for t in (EN, RESPONSE, x_tok) if t not in names]
    if missing:
        raise ParseError(
            f"output is not a recognized format; missing {', '.join(missing)}", positions)
    raise ParseError(
        f"reserved tokens out of order or duplicated: {names}", positions)


def build_multiturn_input(prior_turns: list[tuple[str, TcotParse]], new_query_x: str,
                          vocab: Vocabulary, use_x_history: bool = False,
                          spec=None) -> ConversationHistory:
    """Assemble the conversation for the next target-language turn.

    Only the source-language portions of past outputs become history
    (q_en from the model's own translation step, a_en from its answer
    step); reserved tokens are stripped by construction. With
    use_x_history the target-language sides are used instead.
    """
    turns = []
    for q_x, parse in prior_turns:
        if parse.mode != "tcot" or parse.q_en is None:
            raise InferenceError("prior turn did not parse as a translation chain")
        if use_x_history:
            turns.append((q_x, vocab.decode(parse.a_x)))
        else:
            turns.append((vocab.decode(parse.q_en), vocab.decode(parse.a_en)))
    return ConversationHistory(turns=turns, pending=new_query_x)


# natural-language variant of the chain template, used by the template
# ablation instead of reserved tokens
def nlt_segments(language_name: str) -> tuple[str, str, str]:
    return (
        "Let me interpret the instruction in English: ",
        " Then the English response is: ",
        f" Finally, the {language_name} response is: ",
    )


def parse_nlt(output_text: str, language_name: str) -> dict[str, str]:
    seg1, seg2, seg3 = nlt_segments(language_name)
    if not output_text.startswith(seg1) or seg2 not in output_text or seg3 not in output_text:
        raise ParseError("output does not follow the natural-language chain template")
    rest = output_text[len(seg1):]
    q_en, rest = rest.split(seg2, 1)
    a_en, a_x = rest.split(seg3, 1)
    return {"q_en": q_en, "a_en": a_en, "a_x": a_x}
