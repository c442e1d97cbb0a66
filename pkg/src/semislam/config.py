"""Runtime configuration: flat key=value file with [section] headers.

Unknown sections or keys are hard errors so a typo in a threshold name cannot
silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from io import StringIO


class ConfigError(Exception):
    pass


@dataclass
class GeometrySection:
    undistort_iters: int = 10
    undistort_tol: float = 1e-8


@dataclass
class FeaturesSection:
    n_levels: int = 8
    scale_factor: float = 1.2
    target_keypoints: int = 1000
    grid_cols: int = 10
    grid_rows: int = 8
    fast_threshold: int = 7
    blur_radius: int = 2


@dataclass
class MatchingSection:
    max_hamming: int = 45          # acceptance gate on descriptor distance, bits
    search_radius_px: float = 4.0  # base radius at pyramid level 0
    search_region_factor: float = 1.5


@dataclass
class TrackingSection:
    min_inliers: int = 15
    opt_rounds: int = 4
    opt_iters: int = 10
    lk_levels: int = 3
    lk_window: int = 21
    lk_fb_max_px: float = 0.5
    lk_iters: int = 12
    semidense_zncc_min: float = 0.8
    semidense_depth_band: float = 0.25  # relative half-width of per-frame depth search
    semidense_zncc_budget: int = 400    # epipolar rescue attempts per frame


@dataclass
class MappingSection:
    min_parallax_deg: float = 1.4035
    max_reproj_chi2: float = 0.5991
    keyframe_min_gap: int = 20
    keyframe_retrack_ratio: float = 0.9
    keyframe_min_inliers: int = 50
    cull_found_ratio: float = 0.25
    cull_window_frames: int = 25
    keyframe_cull_redundancy: float = 0.9
    keyframe_cull_keep_recent: int = 2
    local_ba_iters: int = 6
    local_ba_window: int = 8
    mapper_latency_frames: int = 2
    init_min_matches: int = 60
    init_min_parallax_deg: float = 1.4035
    ransac_seed: int = 7


@dataclass
class DensifySection:
    enabled: bool = True
    zncc_min: float = 0.8
    distinct_ratio: float = 0.9
    epipolar_tol_px: float = 2.0
    depth_band: float = 2.5
    depth_range_lo: float = 0.3
    depth_range_hi: float = 3.0
    min_baseline_ratio: float = 0.02
    max_neighbors: int = 4
    patch_size: int = 11


@dataclass
class RelocateSection:
    vocab_branching: int = 10
    vocab_depth: int = 4
    ransac_confidence: float = 0.99
    ransac_max_iters: int = 500
    min_inliers: int = 15
    min_common_words: int = 1
    seed: int = 11


@dataclass
class EvalSection:
    lambda_min: float = 0.25
    lambda_max: float = 4.0
    lambda_steps: int = 200
    theta_step_deg: float = 1.0
    keep_fraction: float = 0.8


_SECTIONS = {
    "geometry": GeometrySection,
    "features": FeaturesSection,
    "matching": MatchingSection,
    "tracking": TrackingSection,
    "mapping": MappingSection,
    "densify": DensifySection,
    "relocate": RelocateSection,
    "eval": EvalSection,
}


@dataclass
class Config:
    geometry: GeometrySection = field(default_factory=GeometrySection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    matching: MatchingSection = field(default_factory=MatchingSection)
    tracking: TrackingSection = field(default_factory=TrackingSection)
    mapping: MappingSection = field(default_factory=MappingSection)
    densify: DensifySection = field(default_factory=DensifySection)
    relocate: RelocateSection = field(default_factory=RelocateSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def dump(self) -> str:
        """Effective configuration, parseable back through load_config."""
        out = StringIO()
        for name in _SECTIONS:
            section = getattr(self, name)
            out.write(f"[{name}]\n")
            for f in dataclasses.fields(section):
                out.write(f"{f.name}={getattr(section, f.name)}\n")
            out.write("\n")
        return out.getvalue()


def _parse_value(text: str, target_type):
    if target_type is bool:
        low = text.strip().lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return target_type(text.strip())


def parse_config(text: str, path: str = "<config>") -> Config:
    cfg = Config()
    section_name = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section_name = line[1:-1].strip()
            if section_name not in _SECTIONS:
                raise ConfigError(f"{path}:{lineno}: unknown section [{section_name}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        if section_name is None:
            raise ConfigError(f"{path}:{lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        section = getattr(cfg, section_name)
        fields = {f.name: f for f in dataclasses.fields(section)}
        if key not in fields:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}' in [{section_name}]")
        ftype = fields[key].type
        pytype = {"int": int, "float": float, "bool": bool, "str": str}[ftype]
        try:
            setattr(section, key, _parse_value(value, pytype))
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return cfg


def load_config(path) -> Config:
    with open(path, "r", encoding="ascii") as fh:
        return parse_config(fh.read(), str(path))


def save_config(path, cfg: Config) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(cfg.dump())
