"""``disentangle-lab`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 1 anything else raised by the library.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import MODES, ExperimentConfig, ensure_writable, load_config
from .data import synth_generate
from .errors import ConfigError, DisentangleError

log = logging.getLogger("disentangle_lab")


def _data_config(path: str, seed: int) -> ExperimentConfig:
    """``--data`` accepts a TOML experiment config or a corpus manifest CSV."""
    p = Path(path)
    if p.suffix == ".toml":
        return load_config(p)
    if not p.is_file():
        raise ConfigError(f"--data: {p} not found")
    return ExperimentConfig(synthetic=None, manifest=p.resolve(), seed=seed)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if cfg.synthetic is None:
        raise ConfigError("gen-data needs a [data.synthetic] section")
    out = ensure_writable(Path(args.out))
    corpus = synth_generate(cfg.synthetic, out)
    print(json.dumps({"manifest": str(out / "manifest.csv"), "utterances": len(corpus.records)}))
    return 0


def cmd_train(args) -> int:
    from .experiments import run_train

    cfg = load_config(args.config)
    if args.out:
        cfg = cfg.replace(output_dir=Path(args.out))
    report = run_train(cfg, args.mode, baseline_ckpt=args.baseline_ckpt)
    print(json.dumps({k: report[k] for k in ("mode", "f1", "probe_accuracy", "checkpoint", "wall_clock_s")}))
    return 0


def cmd_probe(args) -> int:
    from .experiments import run_probe

    cfg = _data_config(args.data, args.seed)
    payload = run_probe(cfg, Path(args.baseline_ckpt), Path(args.target_ckpt))
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_gdv(args) -> int:
    from .experiments import run_gdv

    cfg = _data_config(args.data, args.seed)
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(".gdv.csv")
    report = run_gdv(Path(args.ckpt), cfg, out, member=args.member)
    print(json.dumps({"csv": str(out), "layers": report.layers}))
    return 0


def cmd_sweep_beta(args) -> int:
    from .experiments import DEFAULT_BETAS, run_sweep

    cfg = load_config(args.config)
    out = Path(args.out) if args.out else None
    rows = run_sweep(cfg, args.betas or DEFAULT_BETAS, args.lambda2, out)
    for r in rows:
        print(json.dumps(r))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disentangle-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic corpus (WAVs + manifest.csv)")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an ensemble and write checkpoint + report")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=MODES, default="nusd")
    p.add_argument("--baseline-ckpt", type=Path, help="baseline checkpoint for the probe column")
    p.add_argument("--out", help="override output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="train a speaker probe on baseline embeddings, evaluate on the target's")
    p.add_argument("--baseline-ckpt", required=True)
    p.add_argument("--target-ckpt", required=True)
    p.add_argument("--data", required=True, help="experiment config (.toml) or manifest (.csv)")
    p.add_argument("--seed", type=int, default=7, help="root seed when --data is a manifest")
    p.add_argument("--out", help="also write the JSON here")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gdv", help="layer-wise speaker / condition GDV of one ensemble member")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="experiment config (.toml) or manifest (.csv)")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--member", type=int, default=0)
    p.add_argument("--out", help="CSV path (PNG and JSON are written alongside)")
    p.set_defaults(func=cmd_gdv)

    p = sub.add_parser("sweep-beta", help="baseline plus one NUSD run per beta = lambda1 / lambda2")
    p.add_argument("--config", required=True)
    p.add_argument("--betas", type=_floats, help="comma-separated, default 10,5,2,1,0.5,0.2,0.1")
    p.add_argument("--lambda2", type=float, help="defaults to the config's lambda2")
    p.add_argument("--out", help="override output_dir")
    p.set_defaults(func=cmd_sweep_beta)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except DisentangleError as exc:
        print(f"disentangle-lab: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
