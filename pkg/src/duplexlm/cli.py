"""Command-line entry point: ``duplexlm <subcommand> [options]``.

Every subcommand writes into its ``--out`` directory and leaves a ``manifest.json``
there with the resolved configuration. Option values resolve as
flags > ``--config`` file > built-in defaults; a manifest is accepted as config file,
which replays the run it describes.

Exit codes: 0 success, 1 I/O or data error, 2 usage or configuration error. Errors are
also printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Optional, Sequence

from . import __version__

logger = logging.getLogger("duplexlm")

MANIFEST = "manifest.json"
MANIFEST_SCHEMA = "duplexlm.manifest/1"


class UsageError(Exception):
    """Bad option values or combinations (exit 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message)
        sys.exit(2)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


# -- option tables ----------------------------------------------------------------
# Each subcommand's defaults; argparse only reports flags that were actually given.

SYNTH_FIELDS = ("vocab_size", "silence_unit", "mean_run", "transitions", "dwell_means",
                "bigram_concentration", "n_speaker_profiles", "echo_lag", "frame_ms")

MODEL_DEFAULTS = dict(vocab_size=100, n_layers=4, n_heads=4, embed_dim=64, context_len=257, n_cross_layers=4,
                      use_edge_prediction=True, use_duration_prediction=True, delta=1, architecture="dlm",
                      ffn_mult=4)
TRAIN_DEFAULTS = dict(ablation_id=None, lr=5e-4, warmup_frac=0.01, beta1=0.9, beta2=0.999, batch_size=8,
                      window_frames=256, max_steps=2000, eval_interval=200, eval_split="valid",
                      split_fractions=[0.98, 0.01, 0.01], stop_at_edge_acc=None, log_interval=50)

DEFAULTS: dict[str, dict[str, Any]] = {
    "synth": dict(out=None, seed=0, n_dialogues=100, frames=3000, start_index=0, preset="fisher_like",
                  expected_stats=False,
                  **{k: None for k in SYNTH_FIELDS}),
    "train": dict(corpus=None, out=None, seed=0, **MODEL_DEFAULTS, **TRAIN_DEFAULTS),
    "eval": dict(checkpoint=None, corpus=None, out=None, split="valid", seed=None, window=None),
    "ablate": dict(corpus=None, out=None, seed=0, ids=[0, 1, 2, 3, 4, 5], cross_sweep=[0, 2, 4, 6], seeds=None,
                   **MODEL_DEFAULTS, **TRAIN_DEFAULTS),
    "generate": dict(checkpoint=None, prompts=None, out=None, seed=0, prompt_frames=None, n_continuations=1,
                     max_new_frames=500, temperature=1.0, top_k=0, forbid_self_transition=True, label=None),
    "analyze": dict(corpus=None, vad_a=None, vad_b=None, out=None, seed=0, silence_unit=0, min_silence_ms=200.0,
                    skip_frames=0, frame_ms=20, label=None, svg=False),
    "report": dict(runs=[], labels=None, ground_truth=None, out=None, seed=0, svg=True),
}

# Which keys name input files and output directories, for the manifest.
INPUT_KEYS = ("corpus", "checkpoint", "prompts", "vad_a", "vad_b", "runs", "ground_truth")


def _add_model_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--vocab-size", type=int, help="number of units (default 100)")
    g.add_argument("--n-layers", type=int, help="transformer layers (default 4)")
    g.add_argument("--n-heads", type=int, help="attention heads (default 4)")
    g.add_argument("--embed-dim", type=int, help="model width (default 64)")
    g.add_argument("--context-len", type=int, help="token positions including BOS (default 257)")
    g.add_argument("--n-cross-layers", type=int, help="top layers with cross attention (default 4)")
    g.add_argument("--edge-prediction", dest="use_edge_prediction", action=argparse.BooleanOptionalAction,
                   help="unit loss on edge positions only (default on)")
    g.add_argument("--duration-prediction", dest="use_duration_prediction",
                   action=argparse.BooleanOptionalAction, help="duration head and loss (default on)")
    g.add_argument("--delta", type=int, choices=(0, 1), help="duration read delay (default 1)")
    g.add_argument("--architecture", choices=("dlm", "ms_tlm"), help="model family (default dlm)")
    g.add_argument("--ffn-mult", type=int, help="FFN width multiplier (default 4)")


def _add_train_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--ablation-id", type=int, choices=range(6), help="apply a model variant 0-5")
    g.add_argument("--lr", type=float, help="peak learning rate (default 5e-4)")
    g.add_argument("--warmup-frac", type=float, help="warm-up share of max steps (default 0.01)")
    g.add_argument("--beta1", type=float, help="Adam beta1 (default 0.9)")
    g.add_argument("--beta2", type=float, help="Adam beta2 (default 0.999)")
    g.add_argument("--batch-size", type=int, help="windows per step (default 8)")
    g.add_argument("--window-frames", type=int, help="frames per window (default 256)")
    g.add_argument("--max-steps", type=int, help="optimizer steps (default 2000)")
    g.add_argument("--eval-interval", type=int, help="steps between evaluations (default 200)")
    g.add_argument("--eval-split", choices=("train", "valid", "test"), help="evaluation split (default valid)")
    g.add_argument("--split-fractions", type=float, nargs=3, metavar=("TRAIN", "VALID", "TEST"),
                   help="dialogue split (default 0.98 0.01 0.01)")
    g.add_argument("--stop-at-edge-acc", type=float, help="stop once edge accuracy (%%) exceeds this")
    g.add_argument("--log-interval", type=int, help="steps between train log lines (default 50)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="duplexlm", description="Two-channel unit dialogue modeling pipeline.",
                     argument_default=argparse.SUPPRESS)
    parser.add_argument("--version", action="version", version=f"duplexlm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", default=False, help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_help):
        p.add_argument("--out", help=out_help)
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--config", help="JSON config file or manifest (flags take precedence)")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                       help="info-level logging")

    p = sub.add_parser("synth", help="generate a synthetic two-channel corpus", argument_default=argparse.SUPPRESS)
    common(p, "output directory (corpus.jsonl)")
    p.add_argument("--n-dialogues", type=int, help="number of dialogues (default 100)")
    p.add_argument("--frames", type=int, help="frames per dialogue (default 3000)")
    p.add_argument("--start-index", type=int,
                   help="index of the first dialogue; disjoint ranges give disjoint corpora (default 0)")
    p.add_argument("--preset", choices=("fisher_like", "echo"), help="base parameter set (default fisher_like)")
    p.add_argument("--expected-stats", action="store_true", help="also write expected_stats.json")
    g = p.add_argument_group("process parameters (override the preset)")
    g.add_argument("--vocab-size", type=int)
    g.add_argument("--silence-unit", type=int)
    g.add_argument("--mean-run", type=float, help="mean unit run length in frames")
    g.add_argument("--transitions", type=json.loads, help="4x4 JSON matrix over A, B, BOTH, NEITHER")
    g.add_argument("--dwell-means", type=float, nargs=4, help="mean dwell frames per state")
    g.add_argument("--bigram-concentration", type=float)
    g.add_argument("--n-speaker-profiles", type=int)
    g.add_argument("--echo-lag", type=int, help="B repeats A's units this many frames later")
    g.add_argument("--frame-ms", type=int)

    p = sub.add_parser("train", help="train one model", argument_default=argparse.SUPPRESS)
    common(p, "run directory")
    p.add_argument("--corpus", help="corpus JSONL")
    _add_model_options(p)
    _add_train_options(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split", argument_default=argparse.SUPPRESS)
    common(p, "output directory (eval.json)")
    p.add_argument("--checkpoint", "--ckpt", help="checkpoint file")
    p.add_argument("--corpus", help="corpus JSONL")
    p.add_argument("--split", choices=("train", "valid", "test", "all"), help="split to score (default valid)")
    p.add_argument("--window", type=int, help="evaluation window in frames (default: model context)")

    p = sub.add_parser("ablate", help="train every model variant and the cross-layer sweep",
                       argument_default=argparse.SUPPRESS)
    common(p, "output directory (ablation.csv, one run directory per model)")
    p.add_argument("--corpus", help="corpus JSONL")
    p.add_argument("--ids", type=int, nargs="*", help="variant ids (default 0 1 2 3 4 5)")
    p.add_argument("--cross-sweep", type=int, nargs="*", help="cross-layer counts (default 0 2 4 6)")
    p.add_argument("--seeds", type=int, nargs="+", help="training seeds (default: --seed)")
    _add_model_options(p)
    _add_train_options(p)

    p = sub.add_parser("generate", help="continue prompts with a trained model", argument_default=argparse.SUPPRESS)
    common(p, "output directory (generations.jsonl, mapping.jsonl)")
    p.add_argument("--checkpoint", "--ckpt", help="checkpoint file")
    p.add_argument("--prompts", help="corpus JSONL of prompts")
    p.add_argument("--prompt-frames", type=int,
                   help="cut prompts to this many frames and write the true continuations to reference.jsonl")
    p.add_argument("--n-continuations", "--n", type=int, help="continuations per prompt (default 1)")
    p.add_argument("--max-new-frames", "--frames", type=int, help="frames to generate (default 500)")
    p.add_argument("--temperature", type=float, help="sampling temperature (default 1.0)")
    p.add_argument("--top-k", type=int, help="sample from the k best units, 0 = all (default 0)")
    p.add_argument("--forbid-self-transition", action=argparse.BooleanOptionalAction,
                   help="a new edge must change the unit (default on)")
    p.add_argument("--label", help="model label carried into analyze/report")

    p = sub.add_parser("analyze", help="turn-taking statistics of a corpus or VAD pair",
                       argument_default=argparse.SUPPRESS)
    common(p, "output directory (stats.json, hist_<kind>.csv)")
    p.add_argument("--corpus", help="corpus JSONL")
    p.add_argument("--vad-a", help="channel A VAD CSV (start_s,end_s)")
    p.add_argument("--vad-b", help="channel B VAD CSV (start_s,end_s)")
    p.add_argument("--silence-unit", type=int, help="unit id meaning silence (default 0)")
    p.add_argument("--min-silence-ms", type=float, help="silence that splits IPUs must exceed this (default 200)")
    p.add_argument("--skip-frames", type=int, help="ignore the first frames of every dialogue, e.g. the prompt")
    p.add_argument("--frame-ms", type=int, help="frame length for VAD CSV input (default 20)")
    p.add_argument("--label", help="row label used by report")
    p.add_argument("--svg", action="store_true", help="also plot histograms")

    p = sub.add_parser("report", help="comparison table and duration histograms across runs",
                       argument_default=argparse.SUPPRESS)
    common(p, "output directory (table2.csv, fig3/)")
    p.add_argument("--run", dest="runs", action="append", help="analyze output directory (repeatable)")
    p.add_argument("--label", dest="labels", action="append", help="row label per --run, in order")
    p.add_argument("--ground-truth", help="analyze output directory of the reference data")
    p.add_argument("--svg", action=argparse.BooleanOptionalAction, help="plot histograms (default on)")
    return parser


# -- config resolution ---------------------------------------------------------------


def resolve_config(command: str, given: dict, config_path: Optional[str]) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{config_path}: invalid JSON ({exc})") from exc
        if isinstance(doc, dict) and doc.get("schema") == MANIFEST_SCHEMA:
            if doc.get("subcommand") != command:
                raise UsageError(f"{config_path} is a manifest of '{doc.get('subcommand')}', not '{command}'")
            doc = doc["config"]
        if not isinstance(doc, dict):
            raise UsageError(f"{config_path}: expected a JSON object")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise UsageError(f"{config_path}: unknown keys {unknown}")
        cfg.update(doc)
    cfg.update(given)
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, [], "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def write_manifest(out_dir: Path, command: str, cfg: dict, outputs: Sequence[str], wall_time: float,
                   extra: Optional[dict] = None) -> Path:
    inputs = {k: cfg[k] for k in INPUT_KEYS if cfg.get(k) not in (None, [])}
    doc = {
        "schema": MANIFEST_SCHEMA,
        "tool": "duplexlm",
        "version": __version__,
        "subcommand": command,
        "config": cfg,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "seed": cfg.get("seed"),
        "wall_time_s": round(wall_time, 3),
    }
    if extra:
        doc.update(extra)
    path = out_dir / MANIFEST
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


# -- subcommands -----------------------------------------------------------------------


def _synth_config(cfg: dict):
    from .synth import echo_config, fisher_like

    overrides = {k: cfg[k] for k in SYNTH_FIELDS if cfg.get(k) is not None}
    overrides["seed"] = cfg["seed"]
    try:
        if cfg["preset"] == "echo":
            lag = overrides.pop("echo_lag", 5)
            return echo_config(lag, **overrides)
        return fisher_like(**overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_synth(cfg: dict, out: Path) -> tuple[list[str], dict]:
    from .synth import expected_stats, synth_corpus
    from .units import write_corpus

    scfg = _synth_config(cfg)
    if cfg["n_dialogues"] < 0 or cfg["frames"] < 1 or cfg["start_index"] < 0:
        raise UsageError("--n-dialogues and --start-index must be >= 0 and --frames >= 1")
    write_corpus(out / "corpus.jsonl", synth_corpus(scfg, cfg["n_dialogues"], cfg["frames"], cfg["start_index"]))
    outputs = ["corpus.jsonl"]
    if cfg["expected_stats"]:
        g = expected_stats(scfg)
        (out / "expected_stats.json").write_text(json.dumps(g.to_dict(), indent=2) + "\n")
        outputs.append("expected_stats.json")
    return outputs, {"synth_config": scfg.to_dict()}


def _train_config(cfg: dict, seed: Optional[int] = None):
    from .model import DlmConfig
    from .trainer import TrainConfig

    try:
        model = DlmConfig(**{k: cfg[k] for k in MODEL_DEFAULTS})
        return TrainConfig(
            model=model, ablation_id=cfg["ablation_id"], lr=cfg["lr"], warmup_frac=cfg["warmup_frac"],
            betas=(cfg["beta1"], cfg["beta2"]), batch_size=cfg["batch_size"],
            window_frames=cfg["window_frames"], max_steps=cfg["max_steps"], eval_interval=cfg["eval_interval"],
            eval_split=cfg["eval_split"], split_fractions=tuple(cfg["split_fractions"]),
            stop_at_edge_acc=cfg["stop_at_edge_acc"], seed=cfg["seed"] if seed is None else seed,
            log_interval=cfg["log_interval"],
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(cfg: dict, out: Path) -> tuple[list[str], dict]:
    from .trainer import train

    _require(cfg, "corpus")
    tcfg = _train_config(cfg)
    res = train(tcfg, cfg["corpus"], out)
    final = res.reports[-1]
    logger.info("finished after %d steps: %s", res.steps, final)
    return (["config.json", "metrics.jsonl", "train_log.jsonl", "best.ckpt", "last.ckpt"],
            {"final_eval": final.to_dict(), "steps": res.steps})


def cmd_eval(cfg: dict, out: Path) -> tuple[list[str], dict]:
    from .trainer import evaluate

    _require(cfg, "checkpoint", "corpus")
    rep = evaluate(cfg["checkpoint"], cfg["corpus"], split=cfg["split"], seed=cfg["seed"], window=cfg["window"])
    (out / "eval.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    print(json.dumps(rep.to_dict()))
    return ["eval.json"], {}


def cmd_ablate(cfg: dict, out: Path) -> tuple[list[str], dict]:
    from .trainer import ABLATIONS, run_ablation

    _require(cfg, "corpus")
    base = _train_config(cfg)
    seeds = cfg["seeds"] or [cfg["seed"]]
    bad = [i for i in cfg["ids"] if i not in ABLATIONS]
    if bad:
        raise UsageError(f"unknown ablation ids {bad}")
    t0 = time.time()
    run_dirs: list[str] = []

    def on_run(rd, tcfg, res):
        # each run directory is replayable on its own through `train --config <manifest>`
        sub = dict(DEFAULTS["train"])
        sub.update({k: cfg[k] for k in TRAIN_DEFAULTS if k != "ablation_id"})
        sub.update(tcfg.model.to_dict())
        sub.update(corpus=cfg["corpus"], out=str(rd), seed=tcfg.seed, ablation_id=None)
        sub = {k: sub[k] for k in DEFAULTS["train"]}
        write_manifest(Path(rd), "train", sub, ["config.json", "metrics.jsonl", "train_log.jsonl",
                                                "best.ckpt", "last.ckpt"], time.time() - t0)
        run_dirs.append(Path(rd).name)

    rows = run_ablation(base, cfg["corpus"], ids=cfg["ids"], cross_sweep=cfg["cross_sweep"], seeds=seeds,
                        out_dir=out, on_run=on_run)
    for r in rows:
        print(json.dumps({k: r[k] for k in ("run", "seed", "edge_nll", "edge_acc", "dur_mae", "dur_acc")}))
    return ["ablation.csv"] + [f"{d}/" for d in run_dirs], {}


def cmd_generate(cfg: dict, out: Path) -> tuple[list[str], dict]:
    from .generator import GenConfig, batch_generate, make_prompts
    from .units import read_corpus, write_corpus

    _require(cfg, "checkpoint", "prompts")
    try:
        gcfg = GenConfig(temperature=cfg["temperature"], top_k=cfg["top_k"], max_new_frames=cfg["max_new_frames"],
                         forbid_self_transition=cfg["forbid_self_transition"], seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if cfg["n_continuations"] < 0:
        raise UsageError("--n-continuations must be >= 0")
    samples = read_corpus(cfg["prompts"])
    outputs = ["generations.jsonl", "mapping.jsonl"]
    if cfg["prompt_frames"] is not None:
        if cfg["prompt_frames"] < 0:
            raise UsageError("--prompt-frames must be >= 0")
        prompts = make_prompts(samples, cfg["prompt_frames"])
        total = cfg["prompt_frames"] + cfg["max_new_frames"]
        reference = [s.crop(0, total) for s in samples if s.n_frames >= total]
        write_corpus(out / "reference.jsonl", reference)
        outputs.append("reference.jsonl")
    else:
        prompts = list(samples)
    batch_generate(cfg["checkpoint"], prompts, gcfg, cfg["n_continuations"],
                   out / "generations.jsonl", out / "mapping.jsonl")
    return outputs, {"n_prompts": len(prompts)}


def cmd_analyze(cfg: dict, out: Path) -> tuple[list[str], dict]:
    from .report import plot_histograms
    from .turn_taking import (STAT_KINDS, CorpusAnalysis, VadTrack, analyze_corpus, analyze_tracks,
                              read_vad_csv, write_histogram_csv, write_stats_json)
    from .units import read_corpus

    label = cfg["label"] or ""
    if cfg["corpus"]:
        if cfg["vad_a"] or cfg["vad_b"]:
            raise UsageError("give either --corpus or --vad-a/--vad-b")
        corpus = cfg["corpus"]
        n_skipped = 0
        if cfg["skip_frames"]:
            samples = read_corpus(corpus, strict=False)
            n_skipped = samples.n_skipped
            corpus = [s.crop(cfg["skip_frames"], s.n_frames) for s in samples if s.n_frames > cfg["skip_frames"]]
        result = analyze_corpus(corpus, cfg["silence_unit"], cfg["min_silence_ms"], label=label)
        result.n_skipped += n_skipped
    else:
        _require(cfg, "vad_a", "vad_b")
        seg_a, seg_b = read_vad_csv(cfg["vad_a"]), read_vad_csv(cfg["vad_b"])
        total = max([e for _, e in seg_a + seg_b], default=0.0)
        ta = VadTrack.from_segments(seg_a, total, cfg["frame_ms"])
        tb = VadTrack.from_segments(seg_b, total, cfg["frame_ms"])
        if cfg["skip_frames"]:
            ta = VadTrack(ta.active[cfg["skip_frames"]:], ta.frame_ms)
            tb = VadTrack(tb.active[cfg["skip_frames"]:], tb.frame_ms)
        _, st = analyze_tracks(ta, tb, cfg["min_silence_ms"])
        st.label = label
        result = CorpusAnalysis(st, [("vad", st)])
    write_stats_json(out / "stats.json", result)
    outputs = ["stats.json"]
    for kind in STAT_KINDS:
        name = f"hist_{kind.lower()}"
        write_histogram_csv(out / f"{name}.csv", kind, {label or "corpus": result.stats})
        outputs.append(f"{name}.csv")
        if cfg["svg"]:
            plot_histograms(out / f"{name}.svg", kind, {label or "corpus": result.stats})
            outputs.append(f"{name}.svg")
    print(json.dumps({"label": label, **result.stats.table_row()}))
    return outputs, {"n_skipped": result.n_skipped}


def cmd_report(cfg: dict, out: Path) -> tuple[list[str], dict]:
    from .report import build_report

    if not cfg["runs"] and not cfg["ground_truth"]:
        raise UsageError("give at least one --run or --ground-truth")
    if cfg["labels"] and len(cfg["labels"]) != len(cfg["runs"]):
        raise UsageError("--label must be given once per --run")
    rows = build_report(cfg["runs"], out, cfg["ground_truth"], cfg["labels"], svg=cfg["svg"])
    outputs = ["table2.csv"] + sorted(str(p.relative_to(out)) for p in (out / "fig3").iterdir())
    absent = [r.label for r in rows if not r.present]
    if absent:
        logger.warning("rows without stats: %s", ", ".join(absent))
    return outputs, {"rows": [r.label for r in rows], "absent": absent}


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "generate": cmd_generate,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    verbose = args.pop("verbose", False)
    config_path = args.pop("config", None)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(command, args, config_path)
        _require(cfg, "out")
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.time()
        outputs, extra = COMMANDS[command](cfg, out)
        write_manifest(out, command, cfg, outputs, time.time() - t0, extra)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return 2
    except OSError as exc:
        _emit_error("io", str(exc))
        return 1
    except ValueError as exc:
        _emit_error("data", str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
