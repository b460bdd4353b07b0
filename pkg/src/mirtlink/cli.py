"""Command-line entry point: ``mirtlink {bank,generate,calibrate,link,study,report}``.

Exit codes: 0 on success, 1 when some study conditions failed, 2 for usage,
validation and I/O errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import secrets
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import config as config_mod
from .calibration import CalibrationSpec, calibrate_mcmc, calibrate_oracle, read_responses, write_calibration, write_responses
from .evaluation import write_tables
from .linking import LinkOptions, estimate_transform, format_linking_result
from .model import Family, TestForm, read_item_bank, write_item_bank
from .simulation import (StudyReport, build_anchor_set, default_item_bank, derive_seed, family_population,
                         generate_responses, run_study, sample_thetas)

log = logging.getLogger("mirtlink")

FORMATS = {"item_bank_csv": 1, "response_csv": 1, "linking_record": 1, "study_report_json": 1, "config_schema": 1}


class CliError(Exception):
    def __init__(self, msg: str, code: int = 2):
        super().__init__(msg)
        self.code = code


def _version() -> str:
    try:
        return metadata.version("mirtlink")
    except metadata.PackageNotFoundError:
        return "unknown"


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _write_manifest(out: Path, **entries) -> None:
    manifest = {"mirtlink_version": _version(), "formats": FORMATS, **entries}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def _load_form(path, name: str) -> TestForm:
    try:
        return TestForm(name, read_item_bank(Path(path)))
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read item bank {path}: {exc}") from exc


def cmd_bank(args) -> int:
    seed = args.seed if args.seed is not None else secrets.randbits(63)
    out = _outdir(args.out)
    base, new = default_item_bank(seed)
    write_item_bank(base.items, out / "base_bank.csv")
    write_item_bank(new.items, out / "new_bank.csv")
    _write_manifest(out, command="bank", seed=seed, seed_source="argument" if args.seed is not None else "entropy")
    print(f"wrote {out / 'base_bank.csv'} and {out / 'new_bank.csv'} (seed {seed})")
    return 0


def cmd_generate(args) -> int:
    out = _outdir(args.out)
    seed = args.seed if args.seed is not None else secrets.randbits(63)
    seeds = {}
    for name in ("base", "new"):
        form = _load_form(Path(args.bank_dir) / f"{name}_bank.csv", name)
        th_seed = derive_seed(seed, "theta", name, args.rho, 0)
        resp_seed = derive_seed(seed, "responses", name, args.rho, 0)
        thetas = sample_thetas(args.n, args.rho, th_seed)
        try:
            responses = generate_responses(form, thetas, resp_seed)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        write_responses(responses, [it.id for it in form.items], out / f"responses_{name}.csv")
        np.savetxt(out / f"thetas_{name}.csv", thetas, delimiter=",", header="theta1,theta2", comments="")
        seeds[name] = {"theta": th_seed, "responses": resp_seed}
    _write_manifest(out, command="generate", seed=seed, rho=args.rho, n=args.n, derived_seeds=seeds)
    return 0


def cmd_calibrate(args) -> int:
    out = _outdir(args.out)
    form = _load_form(args.bank, "form")
    seed = args.seed if args.seed is not None else secrets.randbits(63)
    spec = CalibrationSpec(mode=args.mode, model_family=Family(args.model), chain_length=args.chain_length,
                           burn_in=args.burn_in, seed=seed, noise_sigma=args.noise_sigma)
    if args.mode == "OracleNoise":
        res = calibrate_oracle(form.items, family_population(Family(args.model), args.rho), spec)
    else:
        if not args.responses:
            raise CliError("MCMC calibration needs --responses")
        responses, ids = read_responses(Path(args.responses))
        if ids != [it.id for it in form.items]:
            raise CliError("response columns do not match the bank item ids")
        res = calibrate_mcmc(responses, form.items, spec)
    write_calibration(res, out / "calibration.csv")
    _write_manifest(out, command="calibrate", seed=seed, mode=args.mode, model=args.model,
                    acceptance_rates=res.acceptance_rates)
    return 0


def cmd_link(args) -> int:
    base = _load_form(args.base, "base")
    new = _load_form(args.new, "new")
    try:
        ids = build_anchor_set(new, args.scenario)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    common = [i for i in ids if i in base.by_id()]
    if not common:
        raise CliError("the two banks share no anchor items")
    result = estimate_transform(base.subset(common), new.subset(common), options=LinkOptions())
    record = format_linking_result(result)
    print(record, end="")
    if args.out:
        Path(args.out).write_text(record)
    return 0


def _parse_only(text: str | None) -> dict | None:
    if not text:
        return None
    only = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in ("rho", "scenario", "model") or not value:
            raise CliError(f"bad --only term {part!r}; use rho=..., scenario=..., model=...")
        only[key] = float(value) if key == "rho" else value.strip()
    return only


def _plots(report: StudyReport, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .model import PackedItems
    from .simulation import item_from_dict

    plt.rcParams["svg.hashsalt"] = "mirtlink"
    plot_dir = out / "plots"
    plot_dir.mkdir(exist_ok=True)
    for (model, rho, scenario), recs in report.cells().items():
        rec = recs[0]
        base = PackedItems([item_from_dict(d) for d in rec.base_anchors])
        linked = PackedItems([item_from_dict(d) for d in rec.linked_anchors])
        t = np.linspace(-4, 4, 161)
        direction = np.ones(base.dim) / np.sqrt(base.dim)
        grid = t[:, None] * direction
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
        ax1.plot(t, base.total_scores(grid), label="base anchors")
        ax1.plot(t, linked.total_scores(grid), "--", label="transformed new anchors")
        ax1.set_xlabel("theta along the equal-weight direction")
        ax1.set_ylabel("anchor TRF")
        ax1.legend(frameon=False)
        for r in recs:
            if r.loss_trace:
                its, losses = zip(*r.loss_trace)
                ax2.loglog(np.add(its, 1), np.maximum(losses, 1e-300), lw=0.8, alpha=0.7)
        ax2.set_xlabel("Nelder-Mead iteration")
        ax2.set_ylabel("best linking loss (one line per replication)")
        fig.suptitle(f"{model}, rho={rho}, {scenario}")
        fig.tight_layout()
        fig.savefig(plot_dir / f"{model}_rho{rho}_{scenario}.svg", metadata={"Date": None})
        plt.close(fig)


def cmd_study(args) -> int:
    try:
        text = Path(args.config).read_text()
        cfg = config_mod.parse_study_config(text, Path(args.config).parent)
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}") from exc
    except (config_mod.ConfigError, ValueError) as exc:
        raise CliError(f"invalid config {args.config}: {exc}") from exc
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, base_seed=args.seed)
    out = _outdir(args.out)
    report = run_study(cfg, only=_parse_only(args.only), jobs=args.jobs, strict=False)
    (out / "report.json").write_text(report.to_json())
    if report.records:
        write_tables(report, out)
        if args.plots:
            _plots(report, out)
    _write_manifest(out, command="study", config_sha256=hashlib.sha256(text.encode()).hexdigest(),
                    base_seed=cfg.base_seed, only=args.only, seeds=report.seeds(),
                    failures=report.failures)
    for f in report.failures:
        print(f"condition failed: {f}", file=sys.stderr)
    return 1 if report.failures else 0


def cmd_report(args) -> int:
    try:
        report = StudyReport.from_json(Path(args.report).read_text())
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read report: {exc}") from exc
    out = _outdir(args.out)
    write_tables(report, out)
    if args.plots:
        _plots(report, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mirtlink", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("bank", help="write the default synthetic base/new item banks")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bank)

    s = sub.add_parser("generate", help="simulate responses for both banks")
    s.add_argument("--bank-dir", required=True)
    s.add_argument("--rho", type=float, required=True)
    s.add_argument("--n", type=int, default=3000)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("calibrate", help="calibrate one form")
    s.add_argument("--bank", required=True)
    s.add_argument("--responses")
    s.add_argument("--model", default="UIRT", choices=[f.value for f in Family])
    s.add_argument("--mode", default="MCMC", choices=["MCMC", "OracleNoise"])
    s.add_argument("--chain-length", type=int, default=2000)
    s.add_argument("--burn-in", type=int, default=1000)
    s.add_argument("--noise-sigma", type=float, default=0.0)
    s.add_argument("--rho", type=float, default=1.0, help="factor correlation of the oracle population")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("link", help="estimate the new-to-base transformation from two banks")
    s.add_argument("base")
    s.add_argument("new")
    s.add_argument("--scenario", default="MCCR", choices=["MCOnly", "MCCR"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_link)

    s = sub.add_parser("study", help="run a configured simulation study")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--only", help="condition filter, e.g. rho=0.5,scenario=MCOnly")
    s.add_argument("--seed", type=int, help="override the study base seed")
    s.add_argument("--plots", action="store_true", help="emit SVG TRF overlays and loss plots")
    s.set_defaults(func=cmd_study)

    s = sub.add_parser("report", help="re-emit tables from a raw report.json")
    s.add_argument("report")
    s.add_argument("--out", required=True)
    s.add_argument("--plots", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"mirtlink: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
