"""Flat `key = value` configuration files with dotted CLI overrides.

Grammar: UTF-8 text, one `key = value` per line, `#` starts a comment,
blank lines ignored. Keys are namespaced model. / train. / synth.; unknown
keys are rejected outright so typos cannot silently change a run.
"""

from __future__ import annotations

from pathlib import Path

from .model import ModelConfig
from .synth import SynthRanges
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(s):
    if s.lower() in ("true", "1", "yes", "on"):
        return True
    if s.lower() in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_int_tuple(s):
    return tuple(int(p.strip()) for p in s.split(",") if p.strip())


def _parse_float_tuple(s):
    return tuple(float(p.strip()) for p in s.split(",") if p.strip())


def _parse_dilations(s):
    sets = [p.strip() for p in s.split(";")]
    if len(sets) == 1:
        return (_parse_int_tuple(sets[0]),) * 4
    if len(sets) != 4:
        raise ConfigError(f"dilations need 1 or 4 sets separated by ';', got {len(sets)}")
    return tuple(_parse_int_tuple(p) for p in sets)


def _parse_k(s):
    return "auto" if s.strip() == "auto" else int(s)


def _fmt_dilations(d):
    return ";".join(",".join(str(x) for x in ds) for ds in d)


def _fmt_tuple(t):
    return ",".join(f"{x:g}" if isinstance(x, float) else str(x) for x in t)


# key -> (parser, formatter, ModelConfig/TrainConfig/SynthRanges field)
MODEL_KEYS = {
    "model.base_width": (int, str, "base_width"),
    "model.unshuffle_factor": (int, str, "unshuffle_factor"),
    "model.encoder_blocks": (_parse_int_tuple, _fmt_tuple, "encoder_blocks"),
    "model.decoder_blocks": (_parse_int_tuple, _fmt_tuple, "decoder_blocks"),
    "model.dilations": (_parse_dilations, _fmt_dilations, "dilations"),
    "model.mslkb_k": (_parse_k, str, "mslkb_k"),
    "model.use_lka": (_parse_bool, str, "use_lka"),
    "model.use_sca": (_parse_bool, str, "use_sca"),
    "model.use_mdcm": (_parse_bool, str, "use_mdcm"),
    "model.use_stripe": (_parse_bool, str, "use_stripe"),
    "model.use_square": (_parse_bool, str, "use_square"),
    "model.use_ffsc": (_parse_bool, str, "use_ffsc"),
    "model.use_mslkb": (_parse_bool, str, "use_mslkb"),
    "model.deep_supervision_levels": (int, str, "deep_supervision_levels"),
}

TRAIN_KEYS = {
    "train.epochs": (int, str, "epochs"),
    "train.batch_size": (int, str, "batch_size"),
    "train.crop": (int, str, "crop"),
    "train.lr_init": (float, repr, "lr_init"),
    "train.lr_min": (float, repr, "lr_min"),
    "train.adam_beta1": (float, repr, "adam_beta1"),
    "train.adam_beta2": (float, repr, "adam_beta2"),
    "train.adam_eps": (float, repr, "adam_eps"),
    "train.lambda_perceptual": (float, repr, "lambda_perceptual"),
    "train.grad_accum_steps": (int, str, "grad_accum_steps"),
    "train.seed": (int, str, "seed"),
    "train.proxy_seed": (int, str, "proxy_seed"),
    "train.supervision_weights": (_parse_float_tuple, _fmt_tuple, "supervision_weights"),
    "train.augment_flips": (_parse_bool, str, "augment_flips"),
}

SYNTH_KEYS = {
    "synth.period": (_parse_float_tuple, _fmt_tuple, "period"),
    "synth.rotation": (_parse_float_tuple, _fmt_tuple, "rotation"),
    "synth.perspective": (float, repr, "perspective"),
    "synth.blur": (_parse_float_tuple, _fmt_tuple, "blur"),
    "synth.strides": (_parse_int_tuple, _fmt_tuple, "strides"),
    "synth.gain": (_parse_float_tuple, _fmt_tuple, "gain"),
}

ALL_KEYS = {**MODEL_KEYS, **TRAIN_KEYS, **SYNTH_KEYS}


def parse_config_text(text, source="<config>"):
    """Parse `key = value` lines into a raw string dict, rejecting unknown keys."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        values[key] = val
    return values


def load_config_file(path):
    return parse_config_text(Path(path).read_text(encoding="utf-8"), source=str(path))


def apply_overrides(values, overrides):
    """Apply `key=value` strings (CLI --set) on top of file values."""
    out = dict(values)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, val = item.partition("=")
        key = key.strip()
        if key not in ALL_KEYS:
            raise ConfigError(f"unknown override key '{key}'")
        out[key] = val.strip()
    return out


def _build(values, table, cls):
    kwargs = {}
    for key, (parse, _fmt, attr) in table.items():
        if key in values:
            try:
                kwargs[attr] = parse(values[key])
            except ConfigError:
                raise
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key}: {values[key]!r} ({exc})") from exc
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def build_configs(values):
    """Raw string dict -> (ModelConfig, TrainConfig, SynthRanges)."""
    return (
        _build(values, MODEL_KEYS, ModelConfig),
        _build(values, TRAIN_KEYS, TrainConfig),
        _build(values, SYNTH_KEYS, SynthRanges),
    )


def serialize_configs(model_cfg, train_cfg=None, synth_ranges=None):
    """Render effective configs back to the file grammar (fully explicit)."""
    lines = []
    for table, obj in ((MODEL_KEYS, model_cfg), (TRAIN_KEYS, train_cfg),
                       (SYNTH_KEYS, synth_ranges)):
        if obj is None:
            continue
        for key, (_parse, fmt, attr) in table.items():
            lines.append(f"{key} = {fmt(getattr(obj, attr))}")
    return "\n".join(lines) + "\n"


def parse_model_config(text):
    values = parse_config_text(text, source="<checkpoint>")
    return _build(values, MODEL_KEYS, ModelConfig)
