"""Command-line front end.

Every command works inside one output directory.  Per-seed artifacts live in
``<output>/seed_<n>/``; ``<output>/run_meta.json`` records the fully
materialised configuration, its digest, the seeds and tool versions.  A
command whose configuration digest differs from the recorded one refuses to
run unless ``--force`` is given.

Configuration files are JSON with optional top-level keys ``corpus``,
``backbone``, ``train``, ``systems``, ``seeds`` and ``output_dir``; anything
left out takes its default.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .backbone import BackboneConfig, BackboneModel
from .checkpoint import load_checkpoint, save_checkpoint
from .classifier import extract_embedding, train_classifier
from .corpus import CorpusConfig, Manifest, generate_corpus, read_manifest, word_name, write_manifest
from .pipelines import (SupervisionMode, SystemSpec, TrainConfig, adaptive_finetune, decode,
                        default_systems, finetune_baseline, predict_severities, run_experiment_matrix,
                        score_decodes, summarize_rows, test_time_adapt, write_results_csv)
from .scoring import UttScore, aggregate, mapsswe, prefixed, significance_report, write_significance

log = logging.getLogger("sdadapt")

EXIT_OK, EXIT_ERROR, EXIT_PREREQ, EXIT_DIGEST = 0, 1, 2, 3


class CliError(RuntimeError):
    def __init__(self, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.code = code


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    systems: list = field(default_factory=default_systems)
    output_dir: str = "runs/default"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def __post_init__(self):
        if not self.seeds:
            raise CliError("config needs at least one seed", EXIT_PREREQ)
        ids = [s.system_id for s in self.systems]
        if len(set(ids)) != len(ids):
            raise CliError("system ids must be unique", EXIT_PREREQ)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"corpus", "backbone", "train", "systems", "output_dir", "seeds"}
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}", EXIT_PREREQ)
        kw = {}
        if "corpus" in d:
            kw["corpus"] = CorpusConfig.from_dict(d["corpus"])
        if "backbone" in d:
            kw["backbone"] = BackboneConfig.from_dict(d["backbone"])
        if "train" in d:
            kw["train"] = TrainConfig.from_dict(d["train"])
        if "systems" in d:
            kw["systems"] = [SystemSpec.from_dict(s) for s in d["systems"]]
        if "output_dir" in d:
            kw["output_dir"] = str(d["output_dir"])
        if "seeds" in d:
            kw["seeds"] = [int(s) for s in d["seeds"]]
        return cls(**kw)

    def to_dict(self) -> dict:
        return {"corpus": self.corpus.to_dict(), "backbone": self.backbone.to_dict(),
                "train": self.train.to_dict(), "systems": [s.to_dict() for s in self.systems],
                "output_dir": self.output_dir, "seeds": list(self.seeds)}

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def for_seed(self, seed: int) -> tuple[CorpusConfig, BackboneConfig, TrainConfig]:
        corpus = CorpusConfig.from_dict({**self.corpus.to_dict(), "rng_seed": seed})
        backbone = BackboneConfig.from_dict({**self.backbone.to_dict(), "seed": seed})
        train = TrainConfig.from_dict({**self.train.to_dict(), "rng_seed": seed})
        return corpus, backbone, train

    def system(self, system_id: str) -> SystemSpec:
        for s in self.systems:
            if s.system_id == system_id:
                return s
        raise CliError(f"no system {system_id!r} in config (have {', '.join(s.system_id for s in self.systems)})",
                       EXIT_PREREQ)


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError:
        raise CliError(f"config file {path} not found", EXIT_PREREQ) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}", EXIT_PREREQ) from None
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config {path}: {exc}", EXIT_PREREQ) from None


# run metadata ---------------------------------------------------------------------------------

def _versions() -> dict:
    return {"sdadapt": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def check_metadata(out: Path, config: ExperimentConfig, command: str, force: bool) -> None:
    """Create or verify ``run_meta.json``; refuse a changed configuration unless forced."""
    out.mkdir(parents=True, exist_ok=True)
    meta_path = out / "run_meta.json"
    digest = config.digest()
    commands = []
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("config_digest") != digest and not force:
            raise CliError(f"{out} was produced with a different configuration "
                           f"(digest {meta.get('config_digest', '?')[:12]} vs {digest[:12]}); "
                           "use a fresh --output or pass --force", EXIT_DIGEST)
        commands = meta.get("commands", [])
    meta = {"config_digest": digest, "config": config.to_dict(), "seeds": list(config.seeds),
            "versions": _versions(), "commands": commands + [command]}
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# artifact paths --------------------------------------------------------------------------------

def seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed_{seed}"


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_")


def aft_path(out: Path, seed: int, system: SystemSpec) -> Path:
    return seed_dir(out, seed) / f"aft_{_slug(system.adapter.name)}.ckpt.json"


def _require(path: Path, command: str) -> Path:
    if not path.exists():
        raise CliError(f"missing {path}; run `sdadapt {command}` first", EXIT_PREREQ)
    return path


def _load_manifests(out: Path, seed: int) -> tuple[Manifest, Manifest]:
    d = seed_dir(out, seed)
    return (read_manifest(_require(d / "train.jsonl", "generate")),
            read_manifest(_require(d / "test.jsonl", "generate")))


def words_of(tokens) -> list[str]:
    return [word_name(t - 1) for t in tokens]


def write_decodes(path: Path, hyps: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for utt_id in sorted(hyps):
            fh.write(json.dumps({"utt_id": utt_id, "hyp": " ".join(words_of(hyps[utt_id]))}) + "\n")
    return path


def read_decodes(path: Path) -> dict:
    out = {}
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out[row["utt_id"]] = [int(w[1:]) + 1 for w in row["hyp"].split()]
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise CliError(f"{path}:{lineno}: bad decode line ({exc})") from None
    return out


def write_scores(path: Path, scores: list[UttScore]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utt_id", "speaker_id", "severity", "seen", "n_ref_words", "substitutions",
                    "deletions", "insertions"])
        for s in scores:
            w.writerow([s.utt_id, s.speaker_id, s.severity, "true" if s.seen_flag else "false",
                        s.n_ref_words, s.substitutions, s.deletions, s.insertions])
    return path


# commands ------------------------------------------------------------------------------------

def _train_classifier(train: Manifest, seed: int):
    embs = [extract_embedding(utts, spk) for spk, utts in train.by_speaker().items()]
    sev = train.severity_of()
    return train_classifier(embs, [sev[e.speaker_id] for e in embs], seed=seed)


def cmd_generate(args, config: ExperimentConfig, out: Path) -> None:
    for seed in _seeds(args, config):
        corpus_cfg, _, _ = config.for_seed(seed)
        train, test = generate_corpus(corpus_cfg)
        d = seed_dir(out, seed)
        d.mkdir(parents=True, exist_ok=True)
        write_manifest(train, d / "train.jsonl")
        write_manifest(test, d / "test.jsonl")
        n = len(read_manifest(d / "train.jsonl").utterances) + len(read_manifest(d / "test.jsonl").utterances)
        if n != len(train.utterances) + len(test.utterances):
            raise CliError(f"manifest validation failed in {d}")
        print(f"seed {seed}: {len(train.utterances)} train / {len(test.utterances)} test utterances -> {d}")


def cmd_train_baseline(args, config, out):
    for seed in _seeds(args, config):
        train, _ = _load_manifests(out, seed)
        _, bb_cfg, tr_cfg = config.for_seed(seed)
        model = finetune_baseline(BackboneModel(bb_cfg), train, tr_cfg)
        clf = _train_classifier(train, seed)
        path = save_checkpoint(seed_dir(out, seed) / "baseline.ckpt.json", model, classifier=clf)
        load_checkpoint(path)
        print(f"seed {seed}: baseline -> {path}")


def _load_baseline(out: Path, seed: int):
    model, _, clf, _ = load_checkpoint(_require(seed_dir(out, seed) / "baseline.ckpt.json", "train-baseline"))
    return model, clf


def cmd_aft(args, config, out):
    system = config.system(args.system)
    if system.adapter is None or not system.aft:
        raise CliError(f"system {system.system_id} does not use adaptive fine-tuning", EXIT_PREREQ)
    for seed in _seeds(args, config):
        train, _ = _load_manifests(out, seed)
        _, _, tr_cfg = config.for_seed(seed)
        baseline, clf = _load_baseline(out, seed)
        model, bank = adaptive_finetune(baseline, system.adapter, train, tr_cfg)
        path = save_checkpoint(aft_path(out, seed, system), model, {"aft": bank}, clf)
        load_checkpoint(path)
        print(f"seed {seed}: AFT {system.adapter.name} -> {path}")


def cmd_adapt(args, config, out):
    system = config.system(args.system)
    if system.adapter is None:
        raise CliError(f"system {system.system_id} has no adapters to estimate", EXIT_PREREQ)
    supervision = args.supervision or system.supervision
    for seed in _seeds(args, config):
        _, test = _load_manifests(out, seed)
        _, _, tr_cfg = config.for_seed(seed)
        tr_cfg.decode_threads = args.threads
        baseline, clf = _load_baseline(out, seed)
        if system.aft:
            model, banks, _, _ = load_checkpoint(_require(aft_path(out, seed, system), f"aft --system {system.system_id}"))
            bank = banks["aft"]
        else:
            model, bank = baseline, None
        sup = SupervisionMode("gt") if supervision == "gt" else SupervisionMode("pseudo", decoder=baseline)
        result = test_time_adapt(model, bank, system.adapter, test, sup, tr_cfg, classifier=clf,
                                 oracle_deficiency=args.oracle_deficiency or system.oracle_deficiency)
        d = seed_dir(out, seed)
        save_checkpoint(d / f"adapted_{_slug(system.system_id)}.ckpt.json", model, {"adapted": result.bank}, clf,
                        extra={"severity": result.severity, "skipped": result.skipped})
        path = write_decodes(d / "decodes" / f"{_slug(system.system_id)}.jsonl", result.hyps)
        print(f"seed {seed}: system {system.system_id} adapted ({len(result.skipped)} utterances "
              f"skipped for adaptation) -> {path}")


def cmd_decode(args, config, out):
    for seed in _seeds(args, config):
        _, test = _load_manifests(out, seed)
        if args.checkpoint:
            model, _, _, _ = load_checkpoint(_require(Path(args.checkpoint), "train-baseline"))
        else:
            model, _ = _load_baseline(out, seed)
        hyps = decode(model, test, batch_size=config.train.decode_batch_size, threads=args.threads)
        path = write_decodes(seed_dir(out, seed) / "decodes" / f"{args.name}.jsonl", hyps)
        print(f"seed {seed}: {len(hyps)} decodes -> {path}")


def _decode_file(out: Path, seed: int, name: str) -> Path:
    return _require(seed_dir(out, seed) / "decodes" / f"{_slug(name)}.jsonl",
                    "decode" if name == "1" else f"adapt --system {name}")


def _scores_for(out: Path, seed: int, name: str, test: Manifest) -> list[UttScore]:
    hyps = read_decodes(_decode_file(out, seed, name))
    missing = [u.utt_id for u in test if u.utt_id not in hyps]
    if missing:
        raise CliError(f"decodes for {name} lack {len(missing)} test utterances (e.g. {missing[0]})")
    return score_decodes(test, hyps)


def cmd_score(args, config, out):
    for seed in _seeds(args, config):
        _, test = _load_manifests(out, seed)
        names = args.systems or sorted(p.stem for p in (seed_dir(out, seed) / "decodes").glob("*.jsonl"))
        if not names:
            raise CliError(f"no decodes under {seed_dir(out, seed) / 'decodes'}; run `sdadapt decode` first",
                           EXIT_PREREQ)
        for name in names:
            scores = _scores_for(out, seed, name, test)
            write_scores(seed_dir(out, seed) / "scores" / f"{_slug(name)}.csv", scores)
            print(f"seed {seed} system {name}: {aggregate(scores)} {aggregate(scores, 'severity')} "
                  f"{aggregate(scores, 'seen_unseen')}")


def cmd_significance(args, config, out):
    a, b = [], []
    seeds = _seeds(args, config)
    for seed in seeds:
        _, test = _load_manifests(out, seed)
        a += prefixed(_scores_for(out, seed, args.a, test), seed)
        b += prefixed(_scores_for(out, seed, args.b, test), seed)
    result = mapsswe(a, b, alpha=args.alpha)
    report = significance_report(args.a, args.b, result, args.alpha)
    sig_dir = out / "significance"
    sig_dir.mkdir(parents=True, exist_ok=True)
    path = write_significance(sig_dir / f"{_slug(args.a)}_vs_{_slug(args.b)}.json", report)
    json.loads(path.read_text())
    print(f"{args.a} vs {args.b}: z={result.z:.3f} p={result.p:.4g} significant={result.significant} -> {path}")


def comparison_pairs(systems) -> list[tuple[str, str]]:
    """Structured AFT systems against the baseline and the single-attribute AFT systems."""
    base = [s.system_id for s in systems if s.adapter is None]
    single = [s.system_id for s in systems if s.adapter is not None and s.aft and s.supervision == "pseudo"
              and s.adapter.label_granularity in ("speaker", "deficiency")]
    structured = [s.system_id for s in systems if s.adapter is not None and s.aft and s.supervision == "pseudo"
                  and s.adapter.label_granularity == "speaker+deficiency"]
    return [(t, r) for t in structured for r in base + single]


def cmd_matrix(args, config, out):
    seeds = _seeds(args, config)
    rows, pooled = [], {}
    for seed in seeds:
        corpus_cfg, bb_cfg, tr_cfg = config.for_seed(seed)
        tr_cfg.decode_threads = args.threads
        train, test = generate_corpus(corpus_cfg)
        baseline = finetune_baseline(BackboneModel(bb_cfg), train, tr_cfg)
        clf = _train_classifier(train, seed)
        result = run_experiment_matrix(train, test, config.systems, tr_cfg, baseline, clf)
        for row in result.rows:
            rows.append({"seed": seed, **row})
        for sid, hyps in result.hyps.items():
            write_decodes(seed_dir(out, seed) / "decodes" / f"{_slug(sid)}.jsonl", hyps)
        for sid, scores in result.scores.items():
            pooled.setdefault(sid, []).extend(prefixed(scores, seed))
        print(f"seed {seed}: " + ", ".join(f"{r['system_id']}={r['wer_overall']:.2f}" for r in result.rows))
    write_results_csv(rows, out / "results.csv", leading=("seed",))
    write_results_csv(summarize_rows(rows), out / "summary.csv")
    sig_dir = out / "significance"
    sig_dir.mkdir(parents=True, exist_ok=True)
    for a, b in comparison_pairs(config.systems):
        res = mapsswe(pooled[a], pooled[b], alpha=0.05)
        write_significance(sig_dir / f"{_slug(a)}_vs_{_slug(b)}.json", significance_report(a, b, res, 0.05))
        print(f"system {a} vs {b}: z={res.z:.3f} p={res.p:.4g} significant={res.significant}")
    with (out / "results.csv").open() as fh:
        if sum(1 for _ in fh) != len(rows) + 1:
            raise CliError("results.csv validation failed")
    print(f"results -> {out / 'results.csv'}, summary -> {out / 'summary.csv'}")


COMMANDS = {"generate": cmd_generate, "train-baseline": cmd_train_baseline, "aft": cmd_aft,
            "adapt": cmd_adapt, "decode": cmd_decode, "score": cmd_score,
            "significance": cmd_significance, "matrix": cmd_matrix}


def _seeds(args, config) -> list[int]:
    return [args.seed] if args.seed is not None else list(config.seeds)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's seed list")
    common.add_argument("--output", help="output directory (overrides the config's output_dir)")
    common.add_argument("--threads", type=int, default=1, help="decode worker threads")
    common.add_argument("--force", action="store_true", help="ignore a configuration digest mismatch")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")

    parser = argparse.ArgumentParser(prog="sdadapt", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write train/test manifests and audio")
    sub.add_parser("train-baseline", parents=[common], help="fine-tune the backbone and severity classifier")
    p = sub.add_parser("aft", parents=[common], help="adaptive fine-tuning for one system")
    p.add_argument("--system", default="9")
    p = sub.add_parser("adapt", parents=[common], help="test-time adaptation and decoding for one system")
    p.add_argument("--system", default="9")
    p.add_argument("--supervision", choices=("gt", "pseudo"))
    p.add_argument("--oracle-deficiency", action="store_true", help="use true severity labels")
    p = sub.add_parser("decode", parents=[common], help="decode the test set without adapters")
    p.add_argument("--checkpoint", help="checkpoint to decode with (default: baseline)")
    p.add_argument("--name", default="1", help="name of the decode file")
    p = sub.add_parser("score", parents=[common], help="score decode files")
    p.add_argument("systems", nargs="*", help="decode names (default: all)")
    p = sub.add_parser("significance", parents=[common], help="MAPSSWE test between two decode sets")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--alpha", type=float, default=0.05)
    sub.add_parser("matrix", parents=[common], help="run every system over every seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_PREREQ
    try:
        config = load_config(args.config)
        out = Path(args.output or config.output_dir)
        check_metadata(out, config, " ".join(["sdadapt"] + list(argv if argv is not None else sys.argv[1:])),
                       args.force)
        COMMANDS[args.command](args, config, out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
