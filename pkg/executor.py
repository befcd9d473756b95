# executor.py - Stage Execution Layer
# Responsibility: run one pipeline stage against a resolved config and collect its outputs
from __future__ import annotations
import os
import time
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

import corpus as corpus_mod
import distill
import evaluation
import lora
import trainer
from bpe import (BpeModel, Vocabulary, apply_bpe, build_vocab, decode_bpe, learn_bpe, load_merges,
                 load_vocab, save_merges, save_vocab)
from config import LENGTH_ALPHA, RunConfig, require_train, write_resolved
from corpus import ParallelCorpus
from decoding import Translator
from transformer import build_model, config_from_train, load_model, save_model
from utils import (ConfigError, LabError, MissingInputError, ensure_dir, require_file, stage_seed,
                   write_json, write_jsonl)

# (config, args, out_dir, verbose) -> outputs for summary.json
StageFn = Callable[[RunConfig, Dict[str, Any], str, bool], Dict[str, Any]]


# ========== RUN STATE ==========
class RunState:
    """Tracks one command's execution and its outputs"""

    def __init__(self, stage: str, out_dir: str, seed: int):
        self.stage = stage
        self.out_dir = out_dir
        self.seed = seed
        self.outputs: Dict[str, Any] = {}
        self.logs: List[Dict[str, Any]] = []
        self.errors: List[str] = []
        self.status = "OK"
        self.exception: Optional[BaseException] = None

    def add_log(self, stage: str, args_keys: List[str], elapsed_ms: int, success: bool,
                error: Optional[str] = None) -> None:
        self.logs.append({
            "stage": stage,
            "args_redacted": args_keys,
            "elapsed_ms": elapsed_ms,
            "ok": success,
            "err": error,
        })
        if not success and error:
            self.errors.append(f"{stage}: {error}")

    @property
    def exit_code(self) -> int:
        if self.exception is None:
            return 0
        return getattr(self.exception, "exit_code", 1)

    def error_payload(self) -> Dict[str, Any]:
        exc = self.exception
        return {"error": type(exc).__name__ if exc else None, "message": str(exc) if exc else None,
                "stage": self.stage, "exit_code": self.exit_code}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stage": self.stage,
            "status": self.status,     # "OK" | "ERROR"
            "seed": self.seed,
            "outputs": self.outputs,
            "logs": self.logs,
            "errors": self.errors,
            "success": self.status == "OK",
        }


# ========== INPUT HELPERS ==========
def _arg(args: Dict[str, Any], cfg: RunConfig, key: str, required: bool = True) -> Optional[str]:
    """A path from the command line, else from the config's `paths` section."""
    value = args.get(key) or cfg.paths.get(key)
    if value is None:
        if required:
            raise MissingInputError(f"Missing required input '--{key.replace('_', '-')}'")
        return None
    return require_file(value)


def _read_corpus(cfg: RunConfig, path: str) -> Tuple[ParallelCorpus, int]:
    return corpus_mod.read_tsv(path, cfg.preprocess.src_lang, cfg.preprocess.tgt_lang)


def _segmentation(cfg: RunConfig, args: Dict[str, Any], data: ParallelCorpus, out_dir: str,
                  verbose: bool) -> Tuple[BpeModel, Vocabulary]:
    """Given merges/vocab, or learned on `data`; always copied next to the stage outputs."""
    merges_path = _arg(args, cfg, "merges", required=False)
    vocab_path = _arg(args, cfg, "vocab", required=False)
    bpe = load_merges(merges_path) if merges_path else learn_bpe(data, cfg.bpe.num_merges, verbose)
    vocab = load_vocab(vocab_path) if vocab_path else build_vocab(bpe, data)
    save_merges(os.path.join(out_dir, "merges.bpe"), bpe)
    save_vocab(os.path.join(out_dir, "vocab.txt"), vocab)
    return bpe, vocab


def _split_for_training(cfg: RunConfig, args: Dict[str, Any]) -> corpus_mod.SplitCorpus:
    train_data, _ = _read_corpus(cfg, _arg(args, cfg, "train"))
    valid_path = _arg(args, cfg, "valid", required=False)
    valid = _read_corpus(cfg, valid_path)[0] if valid_path else train_data.with_pairs(())
    return corpus_mod.SplitCorpus(train=train_data, valid=valid, test=train_data.with_pairs(()), seed=cfg.seed)


def _translator(cfg: RunConfig, args: Dict[str, Any]) -> Translator:
    vocab = load_vocab(_arg(args, cfg, "vocab"))
    bpe = load_merges(_arg(args, cfg, "merges"))
    student_path = _arg(args, cfg, "student", required=False)
    if student_path:
        student, _ = load_model(student_path, vocab.hash())
        bridged = distill.load_bridge(_arg(args, cfg, "checkpoint"), student, vocab.hash())
        return Translator(bridged, bpe, vocab)
    model, manifest = load_model(_arg(args, cfg, "checkpoint"), vocab.hash())
    return Translator(model, bpe, vocab, manifest.get("vocab_hash"))


def _beam(cfg: RunConfig, args: Dict[str, Any]) -> int:
    return int(args.get("beam") or cfg.evaluate.beam_width)


def translator_alpha(cfg: RunConfig) -> float:
    return cfg.train.length_alpha if cfg.train is not None else LENGTH_ALPHA


# ========== STAGES ==========
def stage_synth(cfg: RunConfig, args: Dict[str, Any], out_dir: str, verbose: bool = True) -> Dict[str, Any]:
    n = int(args.get("n") or cfg.synth.n)
    vocab_size = int(args.get("vocab_size") or cfg.synth.vocab_size)
    data = corpus_mod.gen_synthetic(n, cfg.seed, vocab_size, cfg.synth.min_words, cfg.synth.max_words)
    path = os.path.join(out_dir, "synth.tsv")
    corpus_mod.write_tsv(path, data)
    write_json(os.path.join(out_dir, "lexicon.json"), corpus_mod.synthetic_lexicon(cfg.seed, vocab_size))
    if verbose:
        print(f"[Corpus] wrote {n} synthetic pairs ({data.src_lang}->{data.tgt_lang}) to {path}")
    return {"pairs": n, "vocab_size": vocab_size, "corpus": path}


def stage_preprocess(cfg: RunConfig, args: Dict[str, Any], out_dir: str, verbose: bool = True) -> Dict[str, Any]:
    rules = cfg.preprocess
    if rules.input_format == "pair":
        raw, skipped = corpus_mod.read_pair_files(_arg(args, cfg, "input"), _arg(args, cfg, "input_tgt"),
                                                  rules.src_lang, rules.tgt_lang)
    else:
        raw, skipped = _read_corpus(cfg, _arg(args, cfg, "input"))
    cleaned, report = corpus_mod.preprocess(raw, rules, skipped, verbose)
    clean_path = os.path.join(out_dir, "clean.tsv")
    corpus_mod.write_tsv(clean_path, cleaned)
    corpus_mod.write_report(os.path.join(out_dir, "clean_report.json"), report)
    n_instr = corpus_mod.write_instructions(os.path.join(out_dir, "instructions.jsonl"), cleaned,
                                            rules.system_prompt)
    return {"corpus": clean_path, "report": report.to_dict(), "instructions": n_instr}


def stage_split(cfg: RunConfig, args: Dict[str, Any], out_dir: str, verbose: bool = True) -> Dict[str, Any]:
    data, _ = _read_corpus(cfg, _arg(args, cfg, "input"))
    parts = corpus_mod.split(data, cfg.split.ratios, stage_seed(cfg.seed, "split"))
    for name in ("train", "valid", "test"):
        corpus_mod.write_tsv(os.path.join(out_dir, f"{name}.tsv"), getattr(parts, name))
    stats = corpus_mod.corpus_stats(parts)
    stats.to_csv(os.path.join(out_dir, "corpus_stats.csv"), index=False)
    write_json(os.path.join(out_dir, "corpus_stats.json"), stats.to_dict(orient="records"))
    if verbose:
        print(f"[Corpus] split {len(data)} pairs into {parts.sizes()}")
    return {"sizes": dict(zip(("train", "valid", "test"), parts.sizes()))}


def stage_bpe_learn(cfg: RunConfig, args: Dict[str, Any], out_dir: str, verbose: bool = True) -> Dict[str, Any]:
    data, _ = _read_corpus(cfg, _arg(args, cfg, "input"))
    bpe = learn_bpe(data, cfg.bpe.num_merges, verbose)
    vocab = build_vocab(bpe, data)
    save_merges(os.path.join(out_dir, "merges.bpe"), bpe)
    save_vocab(os.path.join(out_dir, "vocab.txt"), vocab)
    return {"merges_learned": len(bpe.merges), "num_merges": bpe.num_merges, "vocab_size": len(vocab),
            "vocab_hash": vocab.hash()}


def stage_bpe_apply(cfg: RunConfig, args: Dict[str, Any], out_dir: str, verbose: bool = True) -> Dict[str, Any]:
    lines = corpus_mod.read_lines(_arg(args, cfg, "input"))
    if args.get("decode"):
        out = [decode_bpe(line.split()) for line in lines]
    else:
        bpe = load_merges(_arg(args, cfg, "merges"))
        out = [" ".join(apply_bpe(bpe, line)) for line in lines]
    path = os.path.join(out_dir, "segmented.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(line + "\n" for line in out)
    return {"lines": len(out), "output": path}


def stage_train(cfg: RunConfig, args: Dict[str, Any], out_dir: str, verbose: bool = True) -> Dict[str, Any]:
    section = require_train(cfg)
    parts = _split_for_training(cfg, args)
    bpe, vocab = _segmentation(cfg, args, parts.train, out_dir, verbose)
    model = build_model(config_from_train(section, len(vocab)), stage_seed(cfg.seed, "train"))
    if verbose:
        print(f"[Trainer] {section.model_architecture}: {model.num_parameters()} parameters, "
              f"vocab {len(vocab)}, {len(parts.train)} training pairs")
    run = trainer.train(model, parts, bpe, vocab, section, out_dir, stage_seed(cfg.seed, "batches"),
                        verbose=verbose)
    save_model(os.path.join(out_dir, "final.ckpt"), model, vocab.hash(), run.steps)
    return {**run.summary(), "parameters": model.num_parameters(), "vocab_hash": vocab.hash()}


def stage_lora_train(cfg: RunConfig, args: Dict[str, Any], out_dir: str, verbose: bool = True) -> Dict[str, Any]:
    vocab = load_vocab(_arg(args, cfg, "vocab"))
    bpe = load_merges(_arg(args, cfg, "merges"))
    base, _ = load_model(_arg(args, cfg, "checkpoint"), vocab.hash())
    parts = _split_for_training(cfg, args)
    spec = lora.LoraSpec.from_section(cfg.lora, stage_seed(cfg.seed, "lora"))
    adapted = lora.inject(base, spec)
    if verbose:
        print(f"[LoRA] rank {spec.rank}, alpha {spec.alpha}: {adapted.num_trainable()} trainable "
              f"of {base.num_parameters()} parameters")
    history = lora.train_adapters(adapted, parts, bpe, vocab, cfg.lora, stage_seed(cfg.seed, "lora-batches"),
                                  verbose)
    write_jsonl(os.path.join(out_dir, "history.jsonl"), history)
    lora.save_adapters(os.path.join(out_dir, "adapters.ckpt"), adapted)
    merged = lora.merge(adapted)
    save_model(os.path.join(out_dir, "merged.ckpt"), merged, vocab.hash())
    return {"trainable": adapted.num_trainable(), "expected_trainable": lora.expected_trainable(base, spec),
            "base_hash": adapted.base_hash(), "final": history[-1] if history else None}


def _distill_corpus(cfg: RunConfig, args: Dict[str, Any]) -> ParallelCorpus:
    data, _ = _read_corpus(cfg, _arg(args, cfg, "train"))
    mix_paths = args.get("mix") or []
    if not mix_paths:
        return data
    weights = cfg.distill.mix_weights
    sources = [data] + [_read_corpus(cfg, require_file(p))[0] for p in mix_paths]
    if len(weights) != len(sources):
        raise ConfigError(f"distill.mix_weights needs {len(sources)} values (train + each --mix), got {len(weights)}")
    n = sum(len(c) for c in sources)
    return corpus_mod.mix_corpora(list(zip(sources, weights)), n, stage_seed(cfg.seed, "mix"))


def stage_distill(cfg: RunConfig, args: Dict[str, Any], out_dir: str, verbose: bool = True) -> Dict[str, Any]:
    section = cfg.distill
    data = _distill_corpus(cfg, args)
    bpe, vocab = _segmentation(cfg, args, data, out_dir, verbose)
    enc_cfg = distill.encoder_config(section, len(vocab))
    src_ids = distill.encode_sentences(bpe, vocab, data.sources, enc_cfg.max_len)
    tgt_ids = distill.encode_sentences(bpe, vocab, data.targets, enc_cfg.max_len)

    teacher = distill.pretrain_teacher(src_ids, enc_cfg, section.teacher_epochs, section.lr, section.batch_size,
                                       stage_seed(cfg.seed, "teacher"), section.teacher_noise, verbose)
    student = distill.student_from_teacher(teacher)
    if section.lora_rank:
        spec = lora.LoraSpec(rank=section.lora_rank, seed=stage_seed(cfg.seed, "student-lora"))
        student = lora.inject(student, spec)
    history = distill.train_distill(teacher, student, list(zip(src_ids, tgt_ids)), section,
                                    stage_seed(cfg.seed, "distill"), verbose)
    write_jsonl(os.path.join(out_dir, "distill_history.jsonl"), history)
    if isinstance(student, lora.AdaptedModel):
        student = lora.merge(student)
    save_model(os.path.join(out_dir, "teacher.ckpt"), teacher.model, vocab.hash())
    save_model(os.path.join(out_dir, "student.ckpt"), student, vocab.hash())
    return {"teacher_hash": teacher.frozen_hash, "initial": history[0], "final": history[-1]}


def stage_bridge_train(cfg: RunConfig, args: Dict[str, Any], out_dir: str, verbose: bool = True) -> Dict[str, Any]:
    vocab = load_vocab(_arg(args, cfg, "vocab"))
    bpe = load_merges(_arg(args, cfg, "merges"))
    student, _ = load_model(_arg(args, cfg, "student"), vocab.hash())
    parts = _split_for_training(cfg, args)
    max_len = student.config.max_len
    train_pairs = trainer.encode_pairs(bpe, vocab, parts.train, max_len)
    eval_pairs = trainer.encode_pairs(bpe, vocab, parts.valid, max_len)

    decoder = build_model(distill.decoder_config(student, len(vocab), cfg.bridge), stage_seed(cfg.seed, "decoder"))
    bridge = distill.Bridge(student.config.d_model, decoder.config.d_model, stage_seed(cfg.seed, "bridge"))
    history = distill.train_bridge_decoder(student, bridge, decoder, train_pairs, eval_pairs, vocab, cfg.bridge,
                                           stage_seed(cfg.seed, "bridge-batches"), verbose)
    write_jsonl(os.path.join(out_dir, "bridge_history.jsonl"), history)
    distill.save_bridge(os.path.join(out_dir, "bridge.ckpt"), bridge, decoder, student.param_hash(), vocab.hash())
    return {"student_hash": student.param_hash(), "final": history[-1] if history else None}


def stage_translate(cfg: RunConfig, args: Dict[str, Any], out_dir: str, verbose: bool = True) -> Dict[str, Any]:
    translator = _translator(cfg, args)
    if args.get("text") is not None:
        sentences = [args["text"]]
    else:
        sentences = corpus_mod.read_lines(_arg(args, cfg, "input"))
    outputs = translator.translate_many(sentences, _beam(cfg, args), length_alpha=translator_alpha(cfg))
    path = os.path.join(out_dir, "translations.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(line + "\n" for line in outputs)
    if verbose and len(outputs) == 1:
        print(outputs[0])
    return {"lines": len(outputs), "output": path, "beam_width": _beam(cfg, args)}


def _parse_bench(spec: str) -> Tuple[str, str, str]:
    """E.g., "flores=hyp.txt:ref.txt" -> ("flores", "hyp.txt", "ref.txt")"""
    name, sep, files = spec.partition("=")
    hyp, sep2, ref = files.partition(":")
    if not sep or not sep2 or not name:
        raise ConfigError(f"--bench must look like name=hyp_path:ref_path, got {spec!r}")
    return name, require_file(hyp), require_file(ref)


def stage_evaluate(cfg: RunConfig, args: Dict[str, Any], out_dir: str, verbose: bool = True) -> Dict[str, Any]:
    smooth_method = cfg.evaluate.smooth
    reports: Dict[str, evaluation.EvalReport] = {}

    if args.get("test"):
        test, _ = _read_corpus(cfg, require_file(args["test"]))
        translator = _translator(cfg, args)
        hyps = translator.translate_many(test.sources, _beam(cfg, args), length_alpha=translator_alpha(cfg))
        with open(os.path.join(out_dir, "hypotheses.txt"), "w", encoding="utf-8", newline="\n") as f:
            f.writelines(h + "\n" for h in hyps)
        reports["test"] = evaluation.bleu(hyps, test.targets, smooth_method, per_sentence=True)
    if args.get("hyp") or args.get("ref"):
        hyps = corpus_mod.read_lines(_arg(args, cfg, "hyp"))
        refs = corpus_mod.read_lines(_arg(args, cfg, "ref"))
        reports["main"] = evaluation.bleu(hyps, refs, smooth_method, per_sentence=True)
    for spec in args.get("bench") or []:
        name, hyp_path, ref_path = _parse_bench(spec)
        reports[name] = evaluation.bleu(corpus_mod.read_lines(hyp_path), corpus_mod.read_lines(ref_path),
                                        smooth_method)
    if not reports:
        raise MissingInputError("evaluate needs --hyp/--ref, --bench or --test with a checkpoint")

    first = next(iter(reports.values()))
    evaluation.write_report(os.path.join(out_dir, "report.json"), first)
    table = evaluation.benchmark_table(reports)
    table.to_csv(os.path.join(out_dir, "benchmark.csv"), index=False)
    write_json(os.path.join(out_dir, "benchmark.json"), table.to_dict(orient="records"))
    if verbose:
        for name, r in reports.items():
            print(f"[Evaluate] {name}: BLEU {r.bleu_percent:.2f} chrF {r.chrf_score:.2f} ({r.n_sentences} sentences)")
    return {"bleu": first.bleu_percent, "chrf": first.chrf_score,
            "benchmarks": {n: {"bleu": r.bleu_percent, "chrf": r.chrf_score} for n, r in reports.items()}}


def _parse_labelled(spec: str) -> Tuple[str, str]:
    label, sep, path = spec.partition("=")
    if not sep or not label:
        raise ConfigError(f"--inputs must look like label=path, got {spec!r}")
    return label, require_file(path)


def stage_analyze(cfg: RunConfig, args: Dict[str, Any], out_dir: str, verbose: bool = True) -> Dict[str, Any]:
    vocab = load_vocab(_arg(args, cfg, "vocab"))
    bpe = load_merges(_arg(args, cfg, "merges"))
    encoder, _ = load_model(_arg(args, cfg, "checkpoint"), vocab.hash())
    max_len = encoder.config.max_len
    result: Dict[str, Any] = {}

    labelled = [_parse_labelled(s) for s in args.get("inputs") or []]
    if labelled:
        blocks, labels = [], []
        for label, path in labelled:
            ids = distill.encode_sentences(bpe, vocab, corpus_mod.read_lines(path), max_len)
            blocks.append(distill.dump_embeddings(encoder, ids, label, os.path.join(out_dir, f"emb_{label}.bin")))
            labels.extend([label] * len(ids))
        pca = evaluation.pca2(np.concatenate(blocks, axis=0))
        evaluation.write_pca(os.path.join(out_dir, "pca.csv"), pca, labels)
        result["pca"] = {"explained_variance_ratio": pca.explained_variance_ratio.tolist(),
                         "degenerate": pca.degenerate, "points": len(labels)}

    pairs_path = _arg(args, cfg, "pairs", required=False)
    if pairs_path:
        data, _ = _read_corpus(cfg, pairs_path)
        src = distill.embed_all(encoder, distill.encode_sentences(bpe, vocab, data.sources, max_len))
        tgt = distill.embed_all(encoder, distill.encode_sentences(bpe, vocab, data.targets, max_len))
        hist = evaluation.cosine_hist(src, tgt, cfg.analyze.bins)
        evaluation.write_histogram(os.path.join(out_dir, "cosine_hist.json"), hist)
        result["cosine"] = {"mean": hist.mean, "median": hist.median, "n_pairs": hist.n_pairs,
                            "flagged": hist.flagged}
        if verbose:
            print(f"[Analyze] mean cross-lingual cosine {hist.mean:.3f} over {hist.n_pairs} pairs")

    if not result:
        raise MissingInputError("analyze needs --inputs label=path and/or --pairs")
    return result


# ========== STAGE REGISTRY ==========
STAGE_REGISTRY: Dict[str, StageFn] = {
    "synth": stage_synth,
    "preprocess": stage_preprocess,
    "split": stage_split,
    "bpe-learn": stage_bpe_learn,
    "bpe-apply": stage_bpe_apply,
    "train": stage_train,
    "lora-train": stage_lora_train,
    "distill": stage_distill,
    "bridge-train": stage_bridge_train,
    "translate": stage_translate,
    "evaluate": stage_evaluate,
    "analyze": stage_analyze,
}


# ========== STAGE EXECUTOR ==========
class StageExecutor:
    """
    Runs one registered stage: resolved config first, then the stage, then summary.json.
    Library errors are captured in the state, never raised.
    """

    def __init__(self, registry: Optional[Dict[str, StageFn]] = None):
        self.registry = registry or STAGE_REGISTRY

    def execute(self, stage: str, cfg: RunConfig, args: Dict[str, Any], out_dir: str,
                verbose: bool = True) -> RunState:
        state = RunState(stage, out_dir, cfg.seed)
        start_time = time.time()
        try:
            fn = self.registry.get(stage)
            if fn is None:
                raise ConfigError(f"Unknown stage: {stage}")
            ensure_dir(out_dir)
            write_resolved(cfg, out_dir)
            if verbose:
                print(f"[Executor] Step 1/1: {stage} -> {out_dir}")
            state.outputs = fn(cfg, args, out_dir, verbose) or {}
            state.add_log(stage, sorted(k for k, v in args.items() if v not in (None, [], False)),
                          int((time.time() - start_time) * 1000), True)
        except LabError as e:
            self._fail(state, e, args, start_time)
        except (OSError, ValueError) as e:
            # unexpected I/O or parse failures still end as a structured error
            self._fail(state, e, args, start_time)

        if os.path.isdir(out_dir):
            write_json(os.path.join(out_dir, "summary.json"), state.to_dict())
        if verbose:
            print(f"[Executor] {stage} finished: {state.status}")
        return state

    @staticmethod
    def _fail(state: RunState, exc: BaseException, args: Dict[str, Any], start_time: float) -> None:
        state.status = "ERROR"
        state.exception = exc
        state.add_log(state.stage, sorted(k for k, v in args.items() if v not in (None, [], False)),
                      int((time.time() - start_time) * 1000), False, f"{type(exc).__name__}: {exc}")
        print(f"[Executor ERROR] Stage '{state.stage}' failed: {exc}")


def execute_stage(stage: str, cfg: RunConfig, args: Dict[str, Any], out_dir: str,
                  verbose: bool = True) -> RunState:
    return StageExecutor().execute(stage, cfg, args, out_dir, verbose)
