"""Plain-text pipeline configuration.

One ``key=value`` per line, ``#`` starts a comment.  Keys are the field
names of the parameter groups (``smoothness_alpha``, ``n_max``,
``alpha1``, ``beta3``, ...) plus the pipeline keys listed in
:data:`PIPELINE_KEYS`.  Unknown keys are rejected.
"""

from dataclasses import dataclass, field, fields, replace

from .densecrf import CrfConfig
from .flowinit import HsParams, WmfParams
from .potentials import UnaryParams
from .regional import RegionalParams


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration entries."""


PIPELINE_KEYS = ("i1", "i2", "score", "mask", "gt_flow", "gt_mask", "seed", "label_space",
                 "uniform_box", "gmm_fg_components", "gmm_bg_components", "gmm_refresh",
                 "mask_blur_sigma", "max_flow", "dump_candidates")

_GROUPS = (("hs", HsParams), ("wmf", WmfParams), ("regional", RegionalParams),
           ("unary", UnaryParams), ("crf", CrfConfig))


@dataclass
class PipelineConfig:
    hs: HsParams = field(default_factory=HsParams)
    wmf: WmfParams = field(default_factory=WmfParams)
    regional: RegionalParams = field(default_factory=RegionalParams)
    unary: UnaryParams = field(default_factory=UnaryParams)
    crf: CrfConfig = field(default_factory=CrfConfig)
    i1: str = None
    i2: str = None
    score: str = None
    mask: str = None
    gt_flow: str = None
    gt_mask: str = None
    seed: int = 0
    label_space: str = "regional"
    uniform_box: tuple = None
    gmm_fg_components: int = 6
    gmm_bg_components: int = 4
    gmm_refresh: bool = True
    mask_blur_sigma: float = 5.0
    max_flow: float = None
    dump_candidates: bool = False

    def __post_init__(self):
        parse_label_space(self.label_space)

    @property
    def uniform_k(self):
        return parse_label_space(self.label_space)[1]


def parse_label_space(text):
    """``"regional"`` or ``"uniform:K"`` -> ``(kind, K or None)``."""
    if text == "regional":
        return "regional", None
    kind, _, count = str(text).partition(":")
    if kind == "uniform":
        try:
            k = int(count)
        except ValueError:
            k = 0
        if k >= 1:
            return "uniform", k
    raise ConfigError(f"label space must be 'regional' or 'uniform:K', got {text!r}")


def _convert(raw, current, annotation):
    kind = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", "")
    if raw.lower() == "none":
        return None
    if kind == "bool" or isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int" or (isinstance(current, int) and not isinstance(current, bool)):
        return int(raw)
    if kind == "float" or isinstance(current, float):
        return float(raw)
    if kind == "tuple":
        return tuple(float(v) for v in raw.replace("(", "").replace(")", "").split(","))
    return raw


def parse_config_text(text, base=None):
    """Parse ``key=value`` lines on top of ``base`` (defaults if None)."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        entries[key] = value
    return apply_overrides(base or PipelineConfig(), entries)


def apply_overrides(cfg, entries):
    """Return a copy of ``cfg`` with string-valued ``entries`` applied."""
    groups = {name: getattr(cfg, name) for name, _ in _GROUPS}
    group_changes = {name: {} for name, _ in _GROUPS}
    top = {}
    top_fields = {f.name: f for f in fields(PipelineConfig)}
    for key, value in entries.items():
        owner = None
        for name, cls in _GROUPS:
            if key in {f.name for f in fields(cls)}:
                owner = name
                break
        try:
            if owner is not None:
                f = next(f for f in fields(type(groups[owner])) if f.name == key)
                group_changes[owner][key] = _convert(value, getattr(groups[owner], key), f.type)
            elif key in PIPELINE_KEYS:
                f = top_fields[key]
                top[key] = _convert(value, getattr(cfg, key), f.type)
            else:
                raise ConfigError(f"unknown configuration key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    try:
        for name, _ in _GROUPS:
            if group_changes[name]:
                top[name] = replace(groups[name], **group_changes[name])
        return replace(cfg, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, base=None):
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read(), base)


def config_to_text(cfg):
    """Serialize every key of ``cfg`` (round-trips through :func:`parse_config_text`)."""
    lines = []
    for name, _ in _GROUPS:
        group = getattr(cfg, name)
        lines.append(f"# {name}")
        for f in fields(group):
            lines.append(f"{f.name}={_fmt(getattr(group, f.name))}")
    lines.append("# pipeline")
    for key in PIPELINE_KEYS:
        lines.append(f"{key}={_fmt(getattr(cfg, key))}")
    return "\n".join(lines) + "\n"


def _fmt(value):
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)
