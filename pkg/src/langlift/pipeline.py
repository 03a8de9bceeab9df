"""End-to-end pipeline over a reproducible artifact directory.

Every step reads its inputs from the workdir, writes its outputs there,
and appends to the run manifest, so steps can run individually from the
command line or all together. Two runs with the same config and seed
produce byte-identical reports.

The full run manufactures a source-language chat model from scratch,
extends its vocabulary for the target language, trains the three
transfer stages with adapters, trains a no-chain ablation baseline from
the shared stage-2 checkpoint, and then measures transfer accuracy,
refusal transfer, forgetting, hidden-state similarity, and attention
structure against the world's exact oracles.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import datapipe as dp
from . import evallab as ev
from . import tokenizer as tok
from . import world as wd
from .inference import (DEFAULT_SYSTEM_PROMPT, TEMPLATE_CHARS,
                        ConversationHistory, build_multiturn_input,
                        greedy_decode, nlt_segments, parse_tcot,
                        render_template, render_template_text)
from .model import (ModelBundle, ModelConfig, SequenceLengthError,
                    attach_adapters, extend_embeddings, init_weights,
                    load_bundle, merge_adapters, save_bundle)
from .trainer import (AblationToggles, StageConfig, approx_full_ft,
                      train_stage)

TOOL_VERSION = "langlift-0.1.0"

TRANSLATION_PROMPTS = [
    "put this in the other tongue: {src}",
    "carry these words across: {src}",
]


class PipelineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class WorldSizes:
    n_words: int = 120
    mono_docs: int = 1500
    parallel_pairs: int = 600
    replay_docs: int = 300
    chat_queries: int = 1500
    transfer_queries: int = 600
    valid_queries: int = 150
    harmful_fraction: float = 0.1
    en_vocab: int = 380
    x_vocab: int = 260


@dataclass
class RunConfig:
    version: int = 1
    seed: int = 0
    languages: list[str] = field(default_factory=lambda: ["X"])
    world: WorldSizes = field(default_factory=WorldSizes)
    model: dict = field(default_factory=lambda: {
        "n_layers": 3, "d_model": 64, "n_heads": 4, "d_ff": 256,
        "max_seq_len": 192, "lora_rank": 8, "lora_alpha": 16.0,
        "lora_dropout": 0.05,
    })
    stages: dict = field(default_factory=lambda: {
        # data-kind ("stage" field) plus optimizer settings per pipeline phase
        "original-lm": {"stage": "target-cpt", "peak_lr": 2e-3, "warmup_ratio": 0.02,
                        "weight_decay": 0.01, "batch_size": 8, "max_epochs": 6,
                        "valid_every": 100, "cosine_horizon_epochs": 8},
        "original-chat": {"stage": "transform-sft", "peak_lr": 1e-3, "warmup_ratio": 0.01,
                          "weight_decay": 0.0, "batch_size": 8, "max_epochs": 5,
                          "valid_every": 200, "cosine_horizon_epochs": 6},
        "target-cpt": {"stage": "target-cpt", "peak_lr": 2e-3, "warmup_ratio": 0.02,
                       "weight_decay": 0.01, "batch_size": 8, "max_epochs": 6,
                       "valid_every": 100, "cosine_horizon_epochs": 8},
        "translation-cpt": {"stage": "translation-cpt", "peak_lr": 2e-3, "warmup_ratio": 0.05,
                            "weight_decay": 0.01, "batch_size": 8, "max_epochs": 4,
                            "valid_every": 400, "cosine_horizon_epochs": 5},
        "transform-sft": {"stage": "transform-sft", "peak_lr": 1e-3, "warmup_ratio": 0.01,
                          "weight_decay": 0.0, "batch_size": 8, "max_epochs": 5,
                          "valid_every": 200, "cosine_horizon_epochs": 6},
        "direct-sft": {"stage": "transform-sft", "peak_lr": 1e-3, "warmup_ratio": 0.01,
                       "weight_decay": 0.0, "batch_size": 8, "max_epochs": 5,
                       "valid_every": 200, "cosine_horizon_epochs": 6},
    })
    toggles: dict = field(default_factory=lambda: asdict(AblationToggles()))
    cpt_window: int = 48
    sft_max_len: int = 160
    eval_max_new: int = 64
    translation_fraction: float = 0.2
    merge_after_stages: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        doc = json.loads(text)
        if doc.get("version") != 1:
            raise PipelineError("unsupported run config version")
        doc["world"] = WorldSizes(**doc.get("world", {}))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise PipelineError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    def stage_config(self, phase: str, seed_offset: int = 0) -> StageConfig:
        args = dict(self.stages[phase])
        args.setdefault("seed", self.seed + seed_offset)
        return StageConfig(**args)

    def ablation(self) -> AblationToggles:
        return AblationToggles(**self.toggles)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def default_config() -> RunConfig:
    return RunConfig()


def tiny_config(seed: int = 0) -> RunConfig:
    """A minutes-free configuration for smoke tests and determinism
    checks; far too small to learn anything."""
    cfg = RunConfig(seed=seed)
    cfg.world = WorldSizes(n_words=40, mono_docs=60, parallel_pairs=30, replay_docs=10,
                           chat_queries=40, transfer_queries=24, valid_queries=10,
                           harmful_fraction=0.2, en_vocab=220, x_vocab=120)
    cfg.model = {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32,
                 "max_seq_len": 160, "lora_rank": 2, "lora_alpha": 4.0,
                 "lora_dropout": 0.0}
    for phase in cfg.stages:
        cfg.stages[phase] = {**cfg.stages[phase], "max_epochs": 1, "max_steps": 3,
                             "valid_every": 2}
    cfg.eval_max_new = 24
    return cfg


# ---------------------------------------------------------------------------
# workspace
# ---------------------------------------------------------------------------


class Workspace:
    """Artifact directory with a manifest and a single-writer lock."""

    def __init__(self, workdir: str):
        self.root = workdir
        os.makedirs(workdir, exist_ok=True)

    def path(self, *parts: str) -> str:
        p = os.path.join(self.root, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.root, "manifest.json")

    def append_manifest(self, step: str, config_hash: str, outputs: list[str]) -> None:
        entries = []
        if os.path.exists(self.manifest_path):
            with open(self.manifest_path, encoding="utf-8") as f:
                entries = json.load(f)
        entries.append({"step": step, "config_hash": config_hash,
                        "outputs": sorted(outputs), "tool_version": TOOL_VERSION})
        tmp = self.manifest_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(entries, f, indent=1, sort_keys=True)
        os.replace(tmp, self.manifest_path)

    @contextlib.contextmanager
    def lock(self):
        lock_path = os.path.join(self.root, "run.lock")
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PipelineError(
                f"{lock_path} exists: another pipeline run owns this workdir") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            os.unlink(lock_path)

    def write_json(self, relpath: str, doc) -> str:
        p = self.path(relpath)
        tmp = p + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1, sort_keys=True)
        os.replace(tmp, p)
        return p

    def read_json(self, relpath: str):
        with open(os.path.join(self.root, relpath), encoding="utf-8") as f:
            return json.load(f)


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


def step_gen_world(cfg: RunConfig, ws: Workspace) -> None:
    outputs = []
    for i, lang in enumerate(cfg.languages):
        spec = wd.build_language_spec(seed=cfg.seed + 1000 * i,
                                      n_words=cfg.world.n_words, language=lang)
        base = f"world/{lang}"
        p = ws.path(base, "spec.json")
        with open(p, "w", encoding="utf-8") as f:
            f.write(spec.to_json())
        outputs.append(p)

        w = cfg.world
        en_mono = wd.gen_corpus(spec, "mono-en", w.mono_docs, seed=cfg.seed + 1)
        x_mono = wd.gen_corpus(spec, "mono-x", w.mono_docs, seed=cfg.seed + 2 + i)
        pairs = wd.gen_corpus(spec, "parallel", w.parallel_pairs, seed=cfg.seed + 3 + i)
        replay = wd.gen_corpus(spec, "mono-en", w.replay_docs, seed=cfg.seed + 4)
        n_queries = w.chat_queries + w.transfer_queries + w.valid_queries
        queries = wd.gen_query_set(spec, n_queries, w.harmful_fraction,
                                   seed=cfg.seed + 5 + i)
        train, valid = wd.split_queries(
            queries, valid_fraction=w.valid_queries / n_queries, seed=cfg.seed + 6)
        chat_q = train[:w.chat_queries]
        transfer_q = train[w.chat_queries:w.chat_queries + w.transfer_queries]

        for name, rows in [
            ("mono_en.jsonl", wd.corpus_rows("mono-en", en_mono)),
            ("mono_x.jsonl", wd.corpus_rows("mono-x", x_mono)),
            ("parallel.jsonl", wd.corpus_rows("parallel", pairs)),
            ("replay_en.jsonl", wd.corpus_rows("mono-en", replay)),
            ("queries_chat.jsonl", wd.query_rows(chat_q)),
            ("queries_transfer.jsonl", wd.query_rows(transfer_q)),
            ("queries_valid.jsonl", wd.query_rows(valid)),
        ]:
            p = ws.path(base, name)
            wd.save_jsonl(p, rows)
            outputs.append(p)
    ws.append_manifest("gen-world", cfg.hash(), outputs)


def _load_world(cfg: RunConfig, ws: Workspace, lang: str):
    base = f"world/{lang}"
    with open(os.path.join(ws.root, base, "spec.json"), encoding="utf-8") as f:
        spec = wd.ToyLanguageSpec.from_json(f.read())
    load = lambda name: wd.load_jsonl(os.path.join(ws.root, base, name))
    return {
        "spec": spec,
        "en_mono": [r["text"] for r in load("mono_en.jsonl")],
        "x_mono": [r["text"] for r in load("mono_x.jsonl")],
        "pairs": wd.pairs_from_rows(load("parallel.jsonl")),
        "replay": [r["text"] for r in load("replay_en.jsonl")],
        "chat_q": wd.queries_from_rows(load("queries_chat.jsonl")),
        "transfer_q": wd.queries_from_rows(load("queries_transfer.jsonl")),
        "valid_q": wd.queries_from_rows(load("queries_valid.jsonl")),
    }


def _format_lines() -> list[str]:
    lines = [
        f"<s>[INST] <<SYS>>\n{DEFAULT_SYSTEM_PROMPT}\n<</SYS>>\n\n",
        " [/INST] ", " </s><s>[INST] ", "".join(nlt_segments("X")),
    ]
    lines += TRANSLATION_PROMPTS
    return lines * 25


def step_learn_vocab(cfg: RunConfig, ws: Workspace) -> None:
    outputs = []
    first = _load_world(cfg, ws, cfg.languages[0])
    v_en = tok.learn_vocab(first["en_mono"] + _format_lines(), cfg.world.en_vocab,
                           alphabet=TEMPLATE_CHARS)
    base = tok.merge_vocab(v_en, tok.Vocabulary([], []),
                           [tok.EOS, tok.PAD, tok.RESPONSE])
    p = ws.path("vocab", "base.txt")
    base.save(p)
    outputs.append(p)
    for lang in cfg.languages:
        data = _load_world(cfg, ws, lang)
        v_x = tok.learn_vocab(data["x_mono"], cfg.world.x_vocab)
        p = ws.path("vocab", f"learned_{lang}.txt")
        v_x.save(p)
        outputs.append(p)
    ws.append_manifest("learn-vocab", cfg.hash(), outputs)


def step_merge_vocab(cfg: RunConfig, ws: Workspace) -> None:
    vocab = tok.Vocabulary.load(os.path.join(ws.root, "vocab", "base.txt"))
    for lang in cfg.languages:
        learned = tok.Vocabulary.load(os.path.join(ws.root, "vocab", f"learned_{lang}.txt"))
        vocab = tok.merge_vocab(vocab, learned, [tok.EN, tok.lang_token(lang)])
    p = ws.path("vocab", "full.txt")
    vocab.save(p)
    _verify_extension_stability(cfg, ws)
    ws.append_manifest("merge-vocab", cfg.hash(), [p])


def _verify_extension_stability(cfg: RunConfig, ws: Workspace) -> None:
    """Source-language text must tokenize identically before and after
    the extension; guaranteed by the disjoint surface alphabets, checked
    here against a sample."""
    base = tok.Vocabulary.load(os.path.join(ws.root, "vocab", "base.txt"))
    full = tok.Vocabulary.load(os.path.join(ws.root, "vocab", "full.txt"))
    data = _load_world(cfg, ws, cfg.languages[0])
    sample = data["en_mono"][:50] + [
        render_template_text(ConversationHistory(pending=q.text))
        for q in data["chat_q"][:20]
    ]
    for text in sample:
        if base.encode(text) != full.encode(text):
            raise PipelineError(
                "vocabulary extension changed the tokenization of source text")


def _vocabs(ws: Workspace):
    base = tok.Vocabulary.load(os.path.join(ws.root, "vocab", "base.txt"))
    full = tok.Vocabulary.load(os.path.join(ws.root, "vocab", "full.txt"))
    return base, full


def step_build_data(cfg: RunConfig, ws: Workspace) -> None:
    base_vocab, full_vocab = _vocabs(ws)
    toggles = cfg.ablation()
    outputs = []

    def dump(name: str, records, vocab) -> None:
        p = ws.path("data", name + ".jsonl")
        dp.save_records(p, records)
        ws.write_json(f"data/{name}.manifest.json",
                      dp.dataset_manifest(records, cfg.seed, tok.vocab_hash(vocab)))
        outputs.append(p)

    first = _load_world(cfg, ws, cfg.languages[0])
    teacher_cls = wd.ExternalTeacher if toggles.teacher == "external" else wd.TeacherOracle

    # source-language chat model data (base vocabulary; original teacher
    # always, because this model IS the original)
    original_teacher = wd.TeacherOracle(first["spec"])
    dump("original_lm", dp.build_cpt(first["en_mono"], base_vocab), base_vocab)
    dump("original_chat", dp.build_rkd(first["chat_q"], original_teacher, base_vocab),
         base_vocab)
    dump("valid_chat", dp.build_rkd(first["valid_q"], original_teacher, base_vocab),
         base_vocab)

    stage1, stage2, stage3, direct, valid3 = [], [], [], [], []
    for lang in cfg.languages:
        data = _load_world(cfg, ws, lang)
        spec = data["spec"]
        teacher = teacher_cls(spec)
        translate = lambda s, sp=spec: wd.oracle_translate(sp, s, "en->x")

        stage1 += dp.build_cpt(data["x_mono"], full_vocab)
        stage2 += dp.build_translation_cpt(data["pairs"], data["replay"], full_vocab,
                                           seed=cfg.seed, language=lang)
        rkd = dp.build_rkd(data["transfer_q"], teacher, full_vocab)
        style = "nlt" if toggles.template == "natural-language" else "special"
        tcot = dp.build_tcot(rkd, translate, full_vocab, language=lang, style=style)
        trans_sft = dp.build_translation_sft(TRANSLATION_PROMPTS, data["pairs"],
                                             full_vocab, language=lang)
        if toggles.use_tcot:
            chain_part = tcot
        else:
            chain_part = dp.build_direct_sft(data["transfer_q"], teacher, translate,
                                             full_vocab)
        rkd_part = rkd if toggles.use_rkd else []
        stage3 += dp.mix_finetune(chain_part, rkd_part, trans_sft, seed=cfg.seed,
                                  translation_fraction=cfg.translation_fraction)
        direct += dp.build_direct_sft(data["transfer_q"], wd.TeacherOracle(spec),
                                      translate, full_vocab)

        rkd_valid = dp.build_rkd(data["valid_q"], wd.TeacherOracle(spec), full_vocab)
        tcot_valid = dp.build_tcot(rkd_valid, translate, full_vocab, language=lang)
        dump(f"valid_rkd_{lang}", rkd_valid, full_vocab)
        dump(f"valid_tcot_{lang}", tcot_valid, full_vocab)
        valid3 += rkd_valid + tcot_valid

    dump("stage1", stage1, full_vocab)
    dump("stage2", stage2, full_vocab)
    dump("stage3", stage3, full_vocab)
    dump("ablation_direct", direct, full_vocab)
    dump("valid_stage3", valid3, full_vocab)
    ws.append_manifest("build-data", cfg.hash(), outputs)


def _guard_vocab(ws: Workspace, name: str, vocab) -> None:
    manifest = ws.read_json(f"data/{name}.manifest.json")
    if manifest["vocab_hash"] != tok.vocab_hash(vocab):
        raise PipelineError(
            f"dataset {name} was built with a different vocabulary "
            f"({manifest['vocab_hash']} != {tok.vocab_hash(vocab)}); rebuild the data")


def _packed(cfg: RunConfig, ws: Workspace, name: str, kind: str, vocab,
            batch_size: int) -> dp.PackedDataset:
    _guard_vocab(ws, name, vocab)
    records = dp.load_records(os.path.join(ws.root, "data", name + ".jsonl"))
    max_len = cfg.cpt_window if kind != "transform-sft" else cfg.sft_max_len
    return dp.pack_and_mix(records, pad_id=vocab.pad_id, seed=cfg.seed, kind=kind,
                           max_len=max_len, batch_size=batch_size,
                           eos_id=vocab.eos_id)


def _valid_examples(cfg, ws, name, kind, vocab):
    packed = _packed(cfg, ws, name, kind, vocab, batch_size=8)
    return packed.examples[:64]


def _metrics_log(ws: Workspace, phase: str):
    path = ws.path("metrics", f"{phase}.jsonl")
    f = open(path, "w", encoding="utf-8")

    def log(entry: dict) -> None:
        f.write(json.dumps(entry, sort_keys=True) + "\n")
        f.flush()

    return path, f, log


def _run_phase(cfg, ws, bundle, phase, dataset, toggles, valid=None) -> str:
    stage_cfg = cfg.stage_config(phase)
    path, f, log = _metrics_log(ws, phase)
    try:
        train_stage(bundle, dataset, stage_cfg, toggles=toggles,
                    valid_examples=valid, select_best=valid is not None, log=log)
    finally:
        f.close()
    return path


def step_train_original(cfg: RunConfig, ws: Workspace) -> None:
    base_vocab, _ = _vocabs(ws)
    model_config = ModelConfig(vocab_size=len(base_vocab), **cfg.model)
    bundle = ModelBundle(config=model_config,
                         weights=init_weights(model_config, seed=cfg.seed),
                         vocab_hash=tok.vocab_hash(base_vocab))
    full = AblationToggles(use_lora=False)
    outputs = []

    lm_data = _packed(cfg, ws, "original_lm", "target-cpt", base_vocab,
                      cfg.stages["original-lm"].get("batch_size", 8))
    outputs.append(_run_phase(cfg, ws, bundle, "original-lm", lm_data, full))

    chat_data = _packed(cfg, ws, "original_chat", "transform-sft", base_vocab,
                        cfg.stages["original-chat"].get("batch_size", 8))
    valid = _valid_examples(cfg, ws, "valid_chat", "transform-sft", base_vocab)
    outputs.append(_run_phase(cfg, ws, bundle, "original-chat", chat_data, full, valid))

    ckpt = ws.path("checkpoints", "original")
    save_bundle(bundle, ckpt, extra_meta={"stage": "original"})
    outputs.append(ckpt)
    ws.append_manifest("train-original", cfg.hash(), outputs)


def step_extend(cfg: RunConfig, ws: Workspace) -> None:
    base_vocab, full_vocab = _vocabs(ws)
    bundle, _ = load_bundle(os.path.join(ws.root, "checkpoints", "original"),
                            expect_vocab_hash=tok.vocab_hash(base_vocab))
    weights = extend_embeddings(bundle.weights, len(base_vocab), len(full_vocab),
                                seed=cfg.seed + 7)
    extended = ModelBundle(config=weights.config, weights=weights,
                           vocab_hash=tok.vocab_hash(full_vocab))
    ckpt = ws.path("checkpoints", "extended")
    save_bundle(extended, ckpt, extra_meta={"stage": "extended"})
    ws.append_manifest("extend", cfg.hash(), [ckpt])


def _load_ckpt(ws: Workspace, name: str, vocab) -> ModelBundle:
    bundle, _ = load_bundle(os.path.join(ws.root, "checkpoints", name),
                            expect_vocab_hash=tok.vocab_hash(vocab))
    return bundle


def step_train_transfer(cfg: RunConfig, ws: Workspace) -> None:
    _, full_vocab = _vocabs(ws)
    toggles = cfg.ablation()
    outputs = []

    bundle = _load_ckpt(ws, "extended", full_vocab)
    attach_adapters(bundle, seed=cfg.seed + 8)
    train_toggles = AblationToggles(**{**asdict(toggles), "use_lora": True})
    # use_lora=False approximates full-parameter training by folding the
    # adapters into the base weights at every stage boundary
    merge_every_stage = not toggles.use_lora

    def maybe_merge(stage_name: str, seed: int) -> None:
        if merge_every_stage or stage_name in cfg.merge_after_stages:
            approx_full_ft(bundle, seed=seed)

    batch = lambda phase: cfg.stages[phase].get("batch_size", 8)
    s1 = _packed(cfg, ws, "stage1", "target-cpt", full_vocab, batch("target-cpt"))
    outputs.append(_run_phase(cfg, ws, bundle, "target-cpt", s1, train_toggles))
    maybe_merge("target-cpt", cfg.seed + 9)

    s2 = _packed(cfg, ws, "stage2", "translation-cpt", full_vocab,
                 batch("translation-cpt"))
    outputs.append(_run_phase(cfg, ws, bundle, "translation-cpt", s2, train_toggles))
    maybe_merge("translation-cpt", cfg.seed + 10)

    cpt_ckpt = ws.path("checkpoints", "cpt_only")
    save_bundle(bundle, cpt_ckpt, extra_meta={"stage": "cpt-only"})
    outputs.append(cpt_ckpt)

    valid3 = _valid_examples(cfg, ws, "valid_stage3", "transform-sft", full_vocab)
    s3 = _packed(cfg, ws, "stage3", "transform-sft", full_vocab, batch("transform-sft"))
    outputs.append(_run_phase(cfg, ws, bundle, "transform-sft", s3, train_toggles, valid3))
    maybe_merge("transform-sft", cfg.seed + 11)

    pre = ws.path("checkpoints", "final_premerge")
    save_bundle(bundle, pre, extra_meta={"stage": "final-premerge"})
    outputs.append(pre)
    if bundle.adapters is not None:
        merge_adapters(bundle.weights, bundle.adapters)
        bundle.adapters = None
    merged = ws.path("checkpoints", "final")
    save_bundle(bundle, merged, extra_meta={"stage": "final"})
    outputs.append(merged)

    # no-chain baseline branches off the shared stage-2 checkpoint
    baseline = _load_ckpt(ws, "cpt_only", full_vocab)
    sd = _packed(cfg, ws, "ablation_direct", "transform-sft", full_vocab,
                 batch("direct-sft"))
    outputs.append(_run_phase(cfg, ws, baseline, "direct-sft", sd,
                              AblationToggles(use_lora=True)))
    db = ws.path("checkpoints", "direct_sft")
    save_bundle(baseline, db, extra_meta={"stage": "direct-sft"})
    outputs.append(db)
    ws.append_manifest("train-transfer", cfg.hash(), outputs)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _lenient_hit(answer: str | None, expected: str) -> bool:
    return answer is not None and sorted(answer.split()) == sorted(expected.split())


def _verdicts(scores_a, scores_b):
    out = []
    for x, y in zip(scores_a, scores_b):
        out.append("win" if x > y else "loss" if x < y else "tie")
    return out


def _multiturn_probe(bundle, valid_q, spec, vocab, max_new: int) -> float:
    """Share of second turns that still come back as a well-formed chain
    when the first turn's source-language portions form the history."""
    probes = [q for q in valid_q if not q.harmful][:8]
    if len(probes) < 2:
        return 0.0
    ok = 0
    total = 0
    for q1, q2 in zip(probes[::2], probes[1::2]):
        qx1 = wd.oracle_translate(spec, q1.text, "en->x")
        qx2 = wd.oracle_translate(spec, q2.text, "en->x")
        prompt = render_template(ConversationHistory(pending=qx1), vocab)
        out1 = greedy_decode(bundle, prompt, max_new=max_new, eos_id=vocab.eos_id)
        total += 1
        try:
            parse1 = parse_tcot(out1, vocab, language=spec.language)
            if parse1.mode != "tcot":
                continue
            history = build_multiturn_input([(qx1, parse1)], qx2, vocab)
            prompt2 = render_template(history, vocab)
            out2 = greedy_decode(bundle, prompt2, max_new=max_new, eos_id=vocab.eos_id)
            if parse_tcot(out2, vocab, language=spec.language).mode == "tcot":
                ok += 1
        except (ev.ParseError, SequenceLengthError):
            continue
    return 100.0 * ok / total if total else 0.0


def step_evaluate(cfg: RunConfig, ws: Workspace) -> dict:
    _, full_vocab = _vocabs(ws)
    final = _load_ckpt(ws, "final_premerge", full_vocab)
    direct = _load_ckpt(ws, "direct_sft", full_vocab)
    cpt_only = _load_ckpt(ws, "cpt_only", full_vocab)
    reference = _load_ckpt(ws, "extended", full_vocab)

    report: dict = {"config_hash": cfg.hash(), "tool_version": TOOL_VERSION,
                    "languages": list(cfg.languages), "per_language": {}}
    outputs = []

    for lang in cfg.languages:
        data = _load_world(cfg, ws, lang)
        spec = data["spec"]
        valid_q = data["valid_q"]

        acc_final = ev.exact_match_eval(final, valid_q, spec, full_vocab,
                                        mode="x", max_new=cfg.eval_max_new)
        acc_direct = ev.exact_match_eval(direct, valid_q, spec, full_vocab,
                                         mode="x", max_new=cfg.eval_max_new)
        delta = ev.delta_between(acc_final, acc_direct)
        n_win = round(delta.win * acc_final.n_queries / 100)
        n_loss = round(delta.loss * acc_final.n_queries / 100)
        p_value = (ev.binomial_test(n_win, n_loss)
                   if n_win + n_loss else 1.0)

        # safety table over outcome categories, zero-sum columns dropped
        table = [list(acc_final.bypass_reject_unclear),
                 list(acc_direct.bypass_reject_unclear)]
        cols = [j for j in range(3) if table[0][j] + table[1][j] > 0]
        chi2 = None
        if len(cols) >= 2:
            trimmed = [[row[j] for j in cols] for row in table]
            try:
                chi2 = ev.chi2_test(trimmed).to_dict()
            except ev.EvalError:
                chi2 = None

        rkd_valid = [r for r in dp.load_records(
            os.path.join(ws.root, "data", f"valid_rkd_{lang}.jsonl"))]
        tcot_valid = [r for r in dp.load_records(
            os.path.join(ws.root, "data", f"valid_tcot_{lang}.jsonl"))]

        forgetting = {
            "cpt_only": ev.forgetting_probability(cpt_only, reference, rkd_valid,
                                                  full_vocab).to_dict(),
            "final": ev.forgetting_probability(final, reference, rkd_valid,
                                               full_vocab).to_dict(),
            "direct_sft": ev.forgetting_probability(direct, reference, rkd_valid,
                                                    full_vocab).to_dict(),
        }

        similarity = (ev.hidden_similarity(final, tcot_valid, full_vocab, language=lang)
                      .to_dict() if final.adapters is not None else None)

        # strict vs lenient judge agreement on the pairwise comparison
        # (lenient credits answers with the right words in any order)
        strict_a, strict_b = acc_final.judge_scores, acc_direct.judge_scores
        lenient_a = [10 if _lenient_hit(a, e) else 1
                     for a, e in zip(acc_final.answers, acc_final.expected)]
        lenient_b = [10 if _lenient_hit(a, e) else 1
                     for a, e in zip(acc_direct.answers, acc_direct.expected)]
        agreement = {
            "with_tie": ev.agreement_rate(_verdicts(strict_a, strict_b),
                                          _verdicts(lenient_a, lenient_b),
                                          include_ties=True),
        }
        try:
            agreement["without_tie"] = ev.agreement_rate(
                _verdicts(strict_a, strict_b), _verdicts(lenient_a, lenient_b),
                include_ties=False)
        except ev.EvalError:
            agreement["without_tie"] = None

        attention_summary = None
        for q in valid_q:
            qx = wd.oracle_translate(spec, q.text, "en->x")
            prompt = render_template(ConversationHistory(pending=qx), full_vocab)
            out = greedy_decode(final, prompt, max_new=cfg.eval_max_new,
                                eos_id=full_vocab.eos_id)
            try:
                dump = ev.attention_dump(final, prompt, out, full_vocab, language=lang)
            except ev.ParseError:
                continue  # output not a well-formed chain; try the next query
            matrix_path = ws.path("report", f"attention_{lang}.npy")
            np.save(matrix_path, dump.matrix)
            sidecar = ws.write_json(f"report/attention_{lang}.json", dump.to_sidecar())
            outputs += [matrix_path, sidecar]
            attention_summary = dump.x_row_mass
            break

        report["per_language"][lang] = {
            "accuracy": {"final": acc_final.to_dict(), "direct_sft": acc_direct.to_dict()},
            "delta_final_vs_direct": delta.to_dict(),
            "binomial": {"n_win": n_win, "n_loss": n_loss, "p_value": p_value,
                         "significant": p_value < 0.05},
            "safety_chi2": chi2,
            "forgetting": forgetting,
            "hidden_similarity": similarity,
            "judge_agreement": agreement,
            "attention_x_row_mass": attention_summary,
            "multiturn_chain_rate": _multiturn_probe(final, valid_q, spec, full_vocab,
                                                     cfg.eval_max_new),
        }

    report_path = ws.write_json("report/report.json", report)
    outputs.append(report_path)

    # aligned tables, one row per comparison
    delta_csv = ws.path("report", "delta.csv")
    with open(delta_csv, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["language", "comparison", "win", "tie", "loss", "delta", "p_value"])
        for lang, res in report["per_language"].items():
            d = res["delta_final_vs_direct"]
            w.writerow([lang, "final vs direct-sft",
                        f"{d['win']:.2f}", f"{d['tie']:.2f}", f"{d['loss']:.2f}",
                        f"{d['delta']:.2f}", f"{res['binomial']['p_value']:.6f}"])
    safety_csv = ws.path("report", "safety.csv")
    with open(safety_csv, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["language", "model", "bypass", "reject", "unclear"])
        for lang, res in report["per_language"].items():
            for name in ("final", "direct_sft"):
                b, r, u = res["accuracy"][name]["bypass_reject_unclear"]
                w.writerow([lang, name, b, r, u])
    outputs += [delta_csv, safety_csv]
    ws.append_manifest("evaluate", cfg.hash(), outputs)
    return report


def run_all(cfg: RunConfig, workdir: str) -> dict:
    ws = Workspace(workdir)
    with ws.lock():
        ws.write_json("config.json", json.loads(cfg.to_json()))
        step_gen_world(cfg, ws)
        step_learn_vocab(cfg, ws)
        step_merge_vocab(cfg, ws)
        step_build_data(cfg, ws)
        step_train_original(cfg, ws)
        step_extend(cfg, ws)
        step_train_transfer(cfg, ws)
        return step_evaluate(cfg, ws)
