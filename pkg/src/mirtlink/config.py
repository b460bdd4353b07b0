"""Study configuration files.

YAML with a ``schema_version`` field and four sections. Unknown keys are
errors; every error message carries the line of the offending entry.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import yaml

from .calibration import CalibrationSpec
from .linking import LinkOptions
from .model import TestForm, read_item_bank
from .simulation import StudyConfig

SCHEMA_VERSION = 1

_STUDY_KEYS = {"rho_levels", "anchor_scenarios", "analysis_models", "n_examinees", "n_replications",
               "base_seed", "new_group_mean", "new_group_cov"}
_BANK_KEYS = {"seed", "base", "new"}
_CAL_KEYS = {"mode", "chain_length", "burn_in", "proposal_scales", "prior_spec", "noise_sigma", "adapt_every"}
_LINK_KEYS = {f.name for f in fields(LinkOptions)}
_SECTIONS = {"schema_version": None, "study": _STUDY_KEYS, "bank": _BANK_KEYS,
             "calibration": _CAL_KEYS, "linking": _LINK_KEYS}

EXAMPLE = """\
schema_version: 1
study:
  rho_levels: [0.5, 0.8, 1.0]
  anchor_scenarios: [MCOnly, MCCR]
  analysis_models: [UIRT, SimpleStructure, Bifactor]
  n_examinees: 3000
  n_replications: 20
  base_seed: 20180413
bank:
  seed: 2018
calibration:
  mode: MCMC
  chain_length: 2000
  burn_in: 1000
linking:
  initial_step: 0.1
"""


class ConfigError(ValueError):
    pass


def _lines(node) -> dict:
    """Map 'section.key' to 1-based line numbers from the YAML node tree."""
    out = {}
    if not isinstance(node, yaml.MappingNode):
        return out
    for k, v in node.value:
        out[k.value] = k.start_mark.line + 1
        if isinstance(v, yaml.MappingNode):
            for kk, _ in v.value:
                out[f"{k.value}.{kk.value}"] = kk.start_mark.line + 1
    return out


def parse_study_config(text: str, base_dir: Path | None = None) -> StudyConfig:
    try:
        data = yaml.safe_load(text) or {}
        lines = _lines(yaml.compose(text))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")

    def fail(key, msg):
        where = f"line {lines[key]}: " if key in lines else ""
        raise ConfigError(f"{where}{key}: {msg}")

    for key, value in data.items():
        if key not in _SECTIONS:
            fail(key, "unknown section")
        allowed = _SECTIONS[key]
        if allowed is not None:
            if not isinstance(value, dict):
                fail(key, "section must be a mapping")
            for sub in value:
                if sub not in allowed:
                    fail(f"{key}.{sub}", "unknown key")
    if data.get("schema_version") != SCHEMA_VERSION:
        fail("schema_version", f"expected {SCHEMA_VERSION}, got {data.get('schema_version')!r}")

    study = dict(data.get("study") or {})
    bank = data.get("bank") or {}
    kwargs = dict(study)
    for k in ("rho_levels", "anchor_scenarios", "analysis_models"):
        if k in kwargs:
            kwargs[k] = tuple(kwargs[k])
    if "seed" in bank:
        kwargs["bank_seed"] = int(bank["seed"])
    if "base" in bank or "new" in bank:
        if not ("base" in bank and "new" in bank):
            fail("bank", "give both 'base' and 'new' bank files")
        root = base_dir or Path(".")
        try:
            forms = tuple(TestForm(name, read_item_bank(root / bank[name])) for name in ("base", "new"))
        except (OSError, ValueError) as exc:
            fail("bank", str(exc))
        kwargs["item_bank"] = forms
    try:
        kwargs["calibration"] = CalibrationSpec(**(data.get("calibration") or {}))
    except (TypeError, ValueError) as exc:
        fail("calibration", str(exc))
    try:
        kwargs["link"] = LinkOptions(**(data.get("linking") or {}))
    except (TypeError, ValueError) as exc:
        fail("linking", str(exc))
    try:
        return StudyConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        culprit = next((f"study.{k}" for k in study if k in msg), "bank" if "form" in msg else "study")
        fail(culprit, msg)


def load_study_config(path) -> StudyConfig:
    path = Path(path)
    return parse_study_config(path.read_text(), path.parent)
