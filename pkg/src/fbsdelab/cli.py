"""Command line entry point: ``fbsdelab {run,presets,validate,report}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ScenarioConfig, config_from_dict, load_config_file
from .errors import ConfigError, LabError
from .runner import EXIT_ERROR, EXIT_FAIL, EXIT_OK, run_scenario, verify_manifest


def _config(args) -> ScenarioConfig:
    if args.config:
        cfg = load_config_file(args.config)
    elif getattr(args, "preset", None):
        cfg = config_from_dict({"preset": args.preset})
    else:
        raise ConfigError("either --config or --preset is required")
    return cfg.with_overrides(seed=getattr(args, "seed", None), output=getattr(args, "output", None))


def _cmd_run(args) -> int:
    cfg = _config(args)
    man = run_scenario(cfg, workers=args.workers)
    v = man.verdict
    status = "PASS" if v["pass"] else ("ERROR" if man.exit_code == EXIT_ERROR else "FAIL")
    print(f"{cfg.preset}: {status} -> {man.output_dir}")
    for name in v["failed_stages"]:
        print(f"  failed stage: {name}")
    if v["halt"]:
        print(f"  halted: {v['halt']}")
    return man.exit_code


def _cmd_presets(args) -> int:
    from .presets import list_presets
    cat = list_presets()
    if args.json:
        print(json.dumps(cat, indent=2))
    else:
        for entry in cat:
            print(f"{entry['name']:18s} {entry['description']}")
            print(f"{'':18s} hypotheses: {', '.join(entry['hypotheses'])}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    from .model import validate_spec
    from .presets import build_preset, check_declared
    cfg = _config(args)
    data = build_preset(cfg.preset, cfg.preset_params)
    rep = validate_spec(data.spec, data.box, data.consts)
    print(f"{cfg.preset}: validation {'ok' if rep.ok else 'FAILED'}")
    for issue in rep.issues[:20]:
        print(f"  {issue.kind}: {issue.message}")
    ok = rep.ok
    for v in check_declared(data):
        print(f"  {v.name:10s} {'pass' if v.passed else 'FAIL'}  margin={v.margin:.4g}")
        ok = ok and v.passed
    return EXIT_OK if ok else EXIT_FAIL


def _cmd_report(args) -> int:
    d = Path(args.directory)
    man = json.loads((d / "manifest.json").read_text())
    checks = verify_manifest(d)
    print(f"preset: {man['config']['preset']}")
    print(f"verdict: {'PASS' if man['verdict']['pass'] else 'FAIL'} (exit {man['exit_code']})")
    for stage, secs in man["timings"].items():
        print(f"  {stage:10s} {secs:8.3f} s")
    bad = [n for n, ok in checks.items() if not ok]
    for name in sorted(checks):
        print(f"  {'ok ' if checks[name] else 'BAD'} {name}")
    if bad:
        return EXIT_ERROR
    return man["exit_code"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbsdelab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=True):
        sp.add_argument("--config", help="scenario YAML file")
        sp.add_argument("--preset", help="run a preset with default settings")
        if seeds:
            sp.add_argument("--seed", type=int, help="override paths.seed")
            sp.add_argument("--workers", type=int, default=1, help="worker threads for path simulation")
            sp.add_argument("--output", help="override output_dir")

    r = sub.add_parser("run", help="run a scenario")
    common(r)
    r.set_defaults(fn=_cmd_run)
    pr = sub.add_parser("presets", help="list built-in presets")
    pr.add_argument("--json", action="store_true")
    pr.set_defaults(fn=_cmd_presets)
    v = sub.add_parser("validate", help="validate a scenario's problem data and hypotheses")
    common(v, seeds=False)
    v.set_defaults(fn=_cmd_validate)
    rep = sub.add_parser("report", help="re-render a manifest and verify file hashes")
    rep.add_argument("directory")
    rep.set_defaults(fn=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except LabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
