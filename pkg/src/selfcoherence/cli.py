"""Command-line entry point: ``scg-toy {train,sample,entropy,bench,eval}``.

Every command reads one JSON run config (see ``RunConfig``); flags override
config values. Outputs go under ``<output_dir>/<run_id>/`` next to a
``manifest.json`` holding the resolved config of each command run there.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger("selfcoherence")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
TRACE_LEVELS = ("none", "masks", "maps")
PAPER_SEEDS = 64
PAPER_STEPS = 50


class UsageError(Exception):
    """Bad flags, config or inputs; maps to exit code 2."""


def parse_seeds(spec) -> list[int]:
    """``"0..3"`` (inclusive), ``"1,4,9"``, an int or a list of ints."""
    if isinstance(spec, int) and not isinstance(spec, bool):
        seeds = [spec]
    elif isinstance(spec, (list, tuple)):
        seeds = [int(s) for s in spec]
    elif isinstance(spec, str):
        m = re.fullmatch(r"\s*(\d+)\s*\.\.\s*(\d+)\s*", spec)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            seeds = list(range(lo, hi + 1))
        else:
            try:
                seeds = [int(s) for s in spec.split(",") if s.strip()]
            except ValueError:
                raise UsageError(f"cannot parse seeds {spec!r}; use '0..3' or '1,2,5'") from None
    else:
        raise UsageError(f"cannot parse seeds {spec!r}")
    if not seeds:
        raise UsageError("seed list is empty")
    return seeds


@dataclass
class RunConfig:
    """Resolved run configuration.

    JSON keys: ``run_id``, ``output_dir``, ``seed`` (training), ``seeds``
    (sampling; list or ``"lo..hi"``), ``dataset`` (DatasetConfig fields),
    ``model`` (ModelConfig fields except vocab_size/grid/num_steps, which
    follow the dataset and schedule), ``schedule`` (``num_steps``,
    ``beta_start``, ``beta_end``), ``train`` (``epochs``, ``lr``,
    ``batch_size``, ``optimizer``, ``max_steps``, ``ema_decay``, ``lr_schedule``), ``guidance``
    (GuidanceConfig fields), ``trace`` (none|masks|maps), ``checkpoint``,
    ``planner_url``, ``planner_timeout`` and ``bench`` (``seed``,
    ``counts``, ``templates``, ``vocab``).
    """

    run_id: str = "run"
    output_dir: str = "out"
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    guidance: dict = field(default_factory=dict)
    trace: str = "none"
    checkpoint: str | None = None
    planner_url: str | None = None
    planner_timeout: float | None = None
    bench: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.seeds = parse_seeds(cfg.seeds)
        if cfg.trace not in TRACE_LEVELS:
            raise UsageError(f"trace must be one of {TRACE_LEVELS}")
        if not re.fullmatch(r"[A-Za-z0-9._-]+", str(cfg.run_id)):
            raise UsageError(f"run_id {cfg.run_id!r} is not a plain file name")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_id

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.run_dir / "model.ckpt"

    def dataset_config(self):
        from .toy_dit.dataset import DatasetConfig

        return DatasetConfig.from_dict(self.dataset)

    def diffusion_schedule(self):
        from .toy_dit.schedule import DiffusionSchedule

        s = dict(self.schedule)
        return DiffusionSchedule.linear(s.pop("num_steps", PAPER_STEPS), s.pop("beta_start", None), s.pop("beta_end", None))

    def model_config(self):
        from .toy_dit.model import ModelConfig

        ds = self.dataset_config()
        return ModelConfig(
            vocab_size=len(ds.vocabulary),
            grid=ds.grid,
            num_steps=self.diffusion_schedule().num_steps,
            **self.model,
        )

    def guidance_config(self):
        from .scg.guidance import GuidanceConfig

        return GuidanceConfig.from_dict(self.guidance)


def write_manifest(cfg: RunConfig, command: str, record: dict) -> Path:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.run_dir / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"commands": {}}
    manifest["commands"][command] = {"config": cfg.to_dict(), **record}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    for key in ("run_id", "output_dir"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def cmd_train(args) -> int:
    import torch

    from .toy_dit.checkpoint import save_checkpoint
    from .toy_dit.dataset import make_dataset
    from .toy_dit.model import build_model
    from .toy_dit.train import TrainResult, train

    cfg = _config(args)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.train["epochs"] = args.epochs
    torch.set_num_threads(1)
    try:
        data_cfg = cfg.dataset_config()
        schedule = cfg.diffusion_schedule()
        model_cfg = cfg.model_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None
    tc = dict(cfg.train)
    model = build_model(model_cfg, cfg.seed)
    result = TrainResult()
    train(
        model,
        make_dataset(data_cfg, cfg.seed),
        schedule,
        epochs=int(tc.get("epochs", 1)),
        lr=float(tc.get("lr", 1e-3)),
        seed=cfg.seed,
        batch_size=int(tc.get("batch_size", 32)),
        optimizer=tc.get("optimizer", "adam"),
        result=result,
        max_steps=tc.get("max_steps"),
        ema_decay=tc.get("ema_decay"),
        lr_schedule=tc.get("lr_schedule", "constant"),
    )
    path = cfg.checkpoint_path
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = {"dataset": data_cfg.to_dict(), "schedule": schedule.to_dict(), "seed": cfg.seed}
    save_checkpoint(model, path, extra)
    losses = result.epoch_losses
    if losses:
        print(f"first epoch loss {losses[0]:.6f}  last epoch loss {losses[-1]:.6f}")
    print(f"checkpoint written to {path}")
    write_manifest(cfg, "train", {"checkpoint": str(path), "epoch_losses": losses})
    return EXIT_OK


def _load_model(cfg: RunConfig):
    from .toy_dit.checkpoint import load_checkpoint
    from .toy_dit.dataset import DatasetConfig
    from .toy_dit.schedule import DiffusionSchedule

    path = cfg.checkpoint_path
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}; run `scg-toy train <config>` first")
    model, extra = load_checkpoint(path)
    data_cfg = DatasetConfig.from_dict(extra["dataset"]) if "dataset" in extra else cfg.dataset_config()
    schedule = DiffusionSchedule(np.array(extra["schedule"]["betas"])) if "schedule" in extra else cfg.diffusion_schedule()
    return model, data_cfg, schedule


def _toy_prompt(words_or_text, vocab):
    """Coarse toy prompt from raw text or the (shape, colour) word pairs of a prompt."""
    from .toy_dit.dataset import coarse_prompt

    if isinstance(words_or_text, str):
        m = re.fullmatch(r"\s*an? (\S+) (\S+) and an? (\S+) (\S+)\s*\.?\s*", words_or_text)
        if not m:
            raise UsageError(f"prompt {words_or_text!r} is not of the form 'a <color> <shape> and a <color> <shape>'")
        bindings = [(m.group(1), m.group(2)), (m.group(3), m.group(4))]
    else:
        bindings = [(color, shape) for shape, color in words_or_text]
    for color, shape in bindings:
        for w in (color, shape):
            if w not in vocab.words:
                raise UsageError(f"word {w!r} is not in the model vocabulary {list(vocab.words)}")
    return coarse_prompt(vocab, bindings)


def _sample_prompts(args, vocab):
    from .benchmark.prompts import read_jsonl

    if args.prompts:
        try:
            entries = read_jsonl(args.prompts)
        except FileNotFoundError:
            raise UsageError(f"prompt file not found: {args.prompts}") from None
        out = []
        for pid, p in entries:
            if p.task != "coarse" or p.place is not None:
                log.warning("skipping %s: toy sampling supports two-object coarse prompts only", pid)
                continue
            out.append((pid, _toy_prompt(p.pair_words(), vocab)))
        if not out:
            raise UsageError(f"{args.prompts} holds no toy-compatible prompts")
        return out
    if not args.prompt:
        raise UsageError("give --prompt TEXT or --prompts FILE.jsonl")
    return [(args.prompt_id or "prompt", _toy_prompt(args.prompt, vocab))]


def cmd_sample(args) -> int:
    import torch

    from .diagnostics import dump_tensors
    from .netpbm import write_ppm
    from .scg.guidance import GuidanceConfig, guided_sample_batch
    from .scg.planner import PlannerClient
    from .toy_dit.sampling import sample

    cfg = _config(args)
    if args.preset == "paper":
        cfg.seeds = list(range(PAPER_SEEDS))
    if args.seeds is not None:
        cfg.seeds = parse_seeds(args.seeds)
    if args.trace is not None:
        cfg.trace = args.trace
    if args.c is not None:
        cfg.guidance["amplification_factor"] = args.c
    torch.set_num_threads(1)
    model, data_cfg, schedule = _load_model(cfg)
    if args.preset == "paper" and schedule.num_steps != PAPER_STEPS:
        raise UsageError(f"paper preset needs a {PAPER_STEPS}-step model, checkpoint has {schedule.num_steps}")
    try:
        gcfg = cfg.guidance_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad guidance config: {exc}") from None
    if cfg.trace == "maps":
        gcfg = GuidanceConfig.from_dict({**gcfg.to_dict(), "record_maps": True})
    client = PlannerClient.from_env({"planner_url": cfg.planner_url, "planner_timeout": cfg.planner_timeout})
    prompts = _sample_prompts(args, data_cfg.vocabulary)
    written = 0
    for pid, prompt in prompts:
        out_dir = cfg.run_dir / pid
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.scg == "off":
            images, traces = sample(model, schedule, prompt.tokens, cfg.seeds), None
        else:
            images, traces = guided_sample_batch(model, schedule, prompt, gcfg, cfg.seeds, client=client)
        for i, seed in enumerate(cfg.seeds):
            write_ppm(out_dir / f"{seed}.ppm", images[i])
            written += 1
            if traces is None or cfg.trace == "none":
                continue
            traces[i].write_masks(out_dir / f"{seed}.masks")
            if cfg.trace == "maps":
                dump_tensors(traces[i].attention_maps(), out_dir / f"{seed}.maps.bin")
        (out_dir / "prompt.json").write_text(json.dumps({"id": pid, "prompt": prompt.to_dict()}, sort_keys=True) + "\n")
    print(f"wrote {written} images under {cfg.run_dir}")
    write_manifest(cfg, "sample", {"scg": args.scg, "guidance": gcfg.to_dict(), "prompts": [p for p, _ in prompts]})
    return EXIT_OK


def cmd_entropy(args) -> int:
    from .diagnostics import DumpFormatError, load_tensors, profile_run

    try:
        maps = load_tensors(args.dump)
    except FileNotFoundError:
        raise UsageError(f"dump not found: {args.dump}") from None
    except DumpFormatError as exc:
        raise UsageError(str(exc)) from None
    try:
        profile = profile_run(maps, args.token)
    except IndexError as exc:
        raise UsageError(str(exc)) from None
    if args.out:
        profile.to_csv(args.out)
    else:
        profile.write_csv(sys.stdout)
    return EXIT_OK


def _bench_templates(names):
    from .benchmark import prompts as bp

    table = {"coarse": bp.COARSE, "coarse-place": bp.COARSE_PLACE, "fine": bp.FINE, "style": bp.STYLE}
    try:
        return [table[n] for n in names]
    except KeyError as exc:
        raise UsageError(f"unknown template {exc.args[0]!r}; known: {sorted(table)}") from None


def cmd_bench(args) -> int:
    from .benchmark.prompts import BenchmarkVocab, VocabularyError, generate_prompts, paper_preset, write_jsonl

    cfg = _config(args) if args.config else RunConfig()
    bench = dict(cfg.bench)
    seed = args.seed if args.seed is not None else int(bench.get("seed", 0))
    try:
        vocab = BenchmarkVocab.from_dict(bench["vocab"]) if "vocab" in bench else BenchmarkVocab()
    except TypeError as exc:
        raise UsageError(f"bad bench vocab: {exc}") from None
    try:
        if args.preset == "paper":
            prompts = paper_preset(seed, vocab)
        else:
            if "counts" not in bench:
                raise UsageError("custom preset needs bench.counts in the config")
            templates = _bench_templates(bench.get("templates", ["coarse-place", "fine", "style"]))
            prompts = generate_prompts(templates, vocab, bench["counts"], seed)
    except VocabularyError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out) if args.out else cfg.run_dir / "bench.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(prompts, out)
    counts = {t: sum(p.task == t for p in prompts) for t in ("coarse", "fine", "style")}
    print(f"wrote {len(prompts)} prompts to {out} ({', '.join(f'{k} {v}' for k, v in counts.items())})")
    if args.config:
        write_manifest(cfg, "bench", {"preset": args.preset, "seed": seed, "output": str(out), "counts": counts})
    return EXIT_OK


def cmd_eval(args) -> int:
    from .benchmark.evaluate import ShapeDetector, evaluate_binding, write_report
    from .benchmark.prompts import read_jsonl
    from .netpbm import read_ppm
    from .toy_dit.dataset import DatasetConfig

    data_cfg = RunConfig.load(args.config).dataset_config() if args.config else DatasetConfig()
    images_dir = Path(args.images_dir)
    try:
        entries = read_jsonl(args.benchmark)
    except FileNotFoundError:
        raise UsageError(f"benchmark file not found: {args.benchmark}") from None
    detector = ShapeDetector(data_cfg.shapes, data_cfg.shape_size)
    rows, tasks = [], []
    for pid, prompt in entries:
        for path in sorted((images_dir / pid).glob("*.ppm"), key=lambda p: (len(p.stem), p.stem)):
            try:
                seed = int(path.stem)
            except ValueError:
                continue
            score = evaluate_binding(read_ppm(path), prompt, detector, data_cfg.colors)
            rows.append((pid, seed, score.accuracy, score.flags))
            tasks.append(prompt.task)
    if not rows:
        expected = [f"{images_dir / pid}/<seed>.ppm" for pid, _ in entries[:5]]
        more = f" (and {len(entries) - 5} more prompts)" if len(entries) > 5 else ""
        raise UsageError("no images found; expected files like:\n  " + "\n  ".join(expected) + more)
    out = Path(args.out) if args.out else images_dir / "report.csv"
    write_report(rows, out)
    summary = {}
    for task in sorted(set(tasks)):
        accs = [r[2] for r, t in zip(rows, tasks) if t == task]
        summary[task] = {"mean_accuracy": float(np.mean(accs)), "images": len(accs)}
    summary["all"] = {"mean_accuracy": float(np.mean([r[2] for r in rows])), "images": len(rows)}
    out.with_suffix(".summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(("task", "mean_accuracy", "images"))
    for task, s in summary.items():
        writer.writerow((task, f"{s['mean_accuracy']:.6f}", s["images"]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scg-toy", description="Self-coherence guidance on a toy diffusion transformer.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="JSON run config")
        p.add_argument("--run-id", dest="run_id")
        p.add_argument("--output-dir", dest="output_dir")

    p = sub.add_parser("train", help="train the toy model and write a checkpoint")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate images with or without guidance")
    common(p)
    p.add_argument("--prompt", help="e.g. 'a red square and a blue disc'")
    p.add_argument("--prompt-id", dest="prompt_id")
    p.add_argument("--prompts", help="benchmark JSONL; two-object coarse prompts are sampled")
    p.add_argument("--seeds", help="'0..3' or '1,5,9'")
    p.add_argument("--scg", choices=("on", "off"), default="on")
    p.add_argument("--c", type=float, help="amplification factor (default 4)")
    p.add_argument("--trace", choices=TRACE_LEVELS)
    p.add_argument("--preset", choices=("paper",), help="64 seeds on a 50-step model")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("entropy", help="per-step, per-layer attention entropy of one token")
    p.add_argument("dump", help="attention dump written by `sample --trace maps`")
    p.add_argument("--token", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("bench", help="write benchmark prompts and questions as JSONL")
    p.add_argument("config", nargs="?")
    p.add_argument("--preset", choices=("paper", "custom"), default="paper")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--run-id", dest="run_id")
    p.add_argument("--output-dir", dest="output_dir")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="score sampled images with the shape/colour oracle")
    p.add_argument("images_dir")
    p.add_argument("benchmark")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures become exit 1 with a one-line message
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
