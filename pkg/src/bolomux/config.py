"""Experiment configuration: schema-validated JSON with shipped defaults.

A config document has four top-level sections: seed, chip, run and notes.
User files are deep-merged over the shipped defaults (dicts merge key by
key, lists and scalars replace), validated against the packaged JSON
schema, and only then turned into live objects.  Validation errors carry
the JSON pointer of the offending field.
"""
import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources

import jsonschema

from .device import BolometerParams
from .experiments import ChipConfig, RunSettings
from .frontend import FilterParams
from .units import Seed


class ConfigError(ValueError):
    """Configuration rejected: bad JSON, schema violation or bad value."""


def _load_packaged(name: str) -> dict:
    with resources.files("bolomux.data").joinpath(name).open("r", encoding="utf-8") as fh:
        return json.load(fh)


def default_config_dict() -> dict:
    """Deep copy of the shipped desk-scale default document."""
    return copy.deepcopy(_load_packaged("default_config.json"))


def config_schema() -> dict:
    return copy.deepcopy(_load_packaged("config_schema.json"))


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else "/"


def validate_config(doc: dict) -> None:
    """Schema-check a complete (merged) document; ConfigError on violation."""
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigError(f"config error at {_pointer(err.absolute_path)}: {err.message}")


def deep_merge(base: dict, override: dict) -> dict:
    """Dicts merge recursively; lists and scalars in override replace base."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def merge_config(user_doc: dict) -> dict:
    merged = deep_merge(default_config_dict(), user_doc)
    validate_config(merged)
    return merged


def load_config_dict(path) -> dict:
    """Read a user JSON file and merge it over the defaults."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            user_doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(user_doc, dict):
        raise ConfigError(f"config {path} must contain a JSON object")
    return merge_config(user_doc)


def build_chip(doc: dict) -> ChipConfig:
    chip = doc["chip"]
    bolometers = tuple(
        BolometerParams(
            f_r0_hz=b["f_r0_hz"],
            kappa_ext_hz=b["kappa_ext_hz"],
            kappa_int_hz=b["kappa_int_hz"],
            tau_th_s=b["tau_th_s"],
            g_th_w_per_k=b["g_th_w_per_k"],
            dfdt_hz_per_k=b["dfdt_hz_per_k"],
            t_bath_k=b["t_bath_k"],
            p_nonlinear_dbm=b["p_nonlinear_dbm"],
        )
        for b in chip["bolometers"])
    filters = tuple(
        FilterParams(
            f_center_hz=f["f_center_hz"],
            fwhm_hz=f["fwhm_hz"],
            insertion_loss_db=f["insertion_loss_db"],
            stopband_floor_db=f["stopband_floor_db"],
            stopband_floors=tuple((p[0], p[1]) for p in f["stopband_floors"])
            if f.get("stopband_floors") else None,
        )
        for f in chip["filters"])
    try:
        return ChipConfig(
            bolometers=bolometers,
            filters=filters,
            channel_map=tuple(chip["channel_map"]),
            noise_sigma_v=chip["noise_sigma_v"],
            sample_rate_hz=chip["sample_rate_hz"],
            line_attenuation_db=chip["line_attenuation_db"],
        )
    except ValueError as exc:
        raise ConfigError(f"config error at /chip: {exc}") from exc


def build_settings(doc: dict) -> RunSettings:
    run = doc["run"]
    try:
        return RunSettings(
            window_s=run["window_s"],
            thermal_dt_s=run["thermal_dt_s"],
            pulse_start_s=run["pulse_start_s"],
            pulse_duration_s=run["pulse_duration_s"],
            demod_bandwidth_hz=run["demod_bandwidth_hz"],
            output_rate_hz=run["output_rate_hz"],
            n_avg=run["n_avg"],
            probe_power_dbm=run["probe_power_dbm"],
            heater_power_dbm=run["heater_power_dbm"],
            probe_detuning_fraction=run["probe_detuning_fraction"],
            baseline_window_s=tuple(run["baseline_window_s"]),
            signal_window_s=tuple(run["signal_window_s"]),
            allow_nonlinear=run["allow_nonlinear"],
        )
    except ValueError as exc:
        raise ConfigError(f"config error at /run: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated configuration plus the canonical merged document."""

    chip: ChipConfig
    settings: RunSettings
    seed: Seed
    doc: dict

    @property
    def sweeps(self) -> dict:
        return self.doc.get("sweeps", {})


def load_config(path=None) -> ExperimentConfig:
    """Load path (or the shipped defaults when None) into live objects."""
    if path is None:
        doc = default_config_dict()
        validate_config(doc)
    else:
        doc = load_config_dict(path)
    return ExperimentConfig(
        chip=build_chip(doc),
        settings=build_settings(doc),
        seed=Seed(doc["seed"]),
        doc=doc,
    )


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(doc: dict) -> str:
    """sha256 of the canonicalized document; stable under key order."""
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()
