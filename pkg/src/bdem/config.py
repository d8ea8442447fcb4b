"""Scene configuration files.

Flat ``key = value`` format with bracketed section headers.  Unknown
sections or keys are hard errors, and every parse or validation message
carries the offending line number.  Colliders are numbered keys inside the
contact section, e.g. ``collider_1 = halfspace 0 0 1 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bonds import PlasticParams
from .contact import BoxCollider, HalfSpace, SphereCollider
from .geometry import load_tet_mesh, build_elements_and_bonds
from .scenes import BUILTIN_SCENES, Scene, built_in_scene
from .solver import SolverConfig


class ConfigError(ValueError):
    pass


_SECTIONS = {
    "scene": {
        "source", "name", "mesh", "resolution", "output", "frames", "fps",
        "slow_motion", "gravity", "seed", "write_meshes",
    },
    "material": {
        "density", "youngs_modulus", "poisson_ratio", "shear_modulus",
        "tensile_strength", "shear_strength",
    },
    "plasticity": {
        "enabled", "fracture_strain", "yield_strain", "weakening",
        "damage_exponent",
    },
    "timestep": {"dt"},
    "contact": {
        "collision_stiffness", "element_collision_stiffness",
        "sliding_friction", "rolling_friction",
    },
    "solver": {
        "method", "epsilon", "max_iterations", "penalty_kappa",
        "pcg_max_iterations", "workers",
    },
}

_METHODS = ("second-order", "first-order", "penalty", "lagrange", "augmented")


@dataclass
class RunConfig:
    """Validated configuration of one simulation run."""

    source: str = "builtin"
    scene_name: str = ""
    mesh_path: str = ""
    resolution: int | None = None
    output: str = "out"
    frames: int = 240
    fps: float = 60.0
    slow_motion: float = 1.0
    gravity: np.ndarray | None = None
    seed: int = 0
    write_meshes: bool = True

    density: float | None = None
    youngs_modulus: float | None = None
    poisson_ratio: float | None = None
    shear_modulus: float | None = None
    tensile_strength: float | None = None
    shear_strength: float | None = None

    plastic: PlasticParams | None = None

    dt: float | None = None

    collision_stiffness: float | None = None
    element_collision_stiffness: float | None = None
    sliding_friction: float | None = None
    rolling_friction: float | None = None
    colliders: list = field(default_factory=list)

    method: str = "second-order"
    epsilon: float | str = "auto"
    max_iterations: int = 300
    penalty_kappa: float = 1e8
    pcg_max_iterations: int = 2000
    workers: int = 1


def _parse_lines(text: str):
    """Yield (lineno, section, key, value) tuples with strict validation."""
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header {line!r}")
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0].strip()
        is_collider = section == "contact" and key.startswith("collider_")
        if key not in _SECTIONS[section] and not is_collider:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        if not value:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        yield lineno, section, key, value


def _number(lineno, key, value, positive=False, non_negative=False):
    try:
        x = float(value)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key!r} must be a number, got {value!r}")
    if positive and x <= 0.0:
        raise ConfigError(f"line {lineno}: {key!r} must be positive, got {x}")
    if non_negative and x < 0.0:
        raise ConfigError(f"line {lineno}: {key!r} must be non-negative, got {x}")
    return x


def _integer(lineno, key, value, positive=False):
    try:
        x = int(value)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key!r} must be an integer, got {value!r}")
    if positive and x <= 0:
        raise ConfigError(f"line {lineno}: {key!r} must be positive, got {x}")
    return x


def _boolean(lineno, key, value):
    low = value.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"line {lineno}: {key!r} must be a boolean, got {value!r}")


def _collider(lineno, value):
    parts = value.split()
    kind = parts[0] if parts else ""
    try:
        nums = [float(x) for x in parts[1:]]
    except ValueError:
        raise ConfigError(f"line {lineno}: collider parameters must be numbers")
    if kind == "halfspace" and len(nums) == 4:
        return HalfSpace(tuple(nums[:3]), nums[3])
    if kind == "sphere" and len(nums) == 4:
        if nums[3] <= 0:
            raise ConfigError(f"line {lineno}: sphere radius must be positive")
        return SphereCollider(tuple(nums[:3]), nums[3])
    if kind == "box" and len(nums) == 6:
        if min(nums[3:]) <= 0:
            raise ConfigError(f"line {lineno}: box half extents must be positive")
        return BoxCollider(tuple(nums[:3]), tuple(nums[3:]))
    raise ConfigError(
        f"line {lineno}: collider must be 'halfspace nx ny nz offset', "
        f"'sphere cx cy cz r', or 'box cx cy cz hx hy hz'"
    )


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    plastic_raw: dict = {}
    plastic_line = 0
    for lineno, section, key, value in _parse_lines(text):
        if section == "scene":
            if key == "source":
                if value not in ("builtin", "mesh"):
                    raise ConfigError(f"line {lineno}: source must be builtin or mesh")
                cfg.source = value
            elif key == "name":
                if value not in BUILTIN_SCENES:
                    raise ConfigError(
                        f"line {lineno}: unknown scene {value!r}; available: "
                        f"{', '.join(sorted(BUILTIN_SCENES))}"
                    )
                cfg.scene_name = value
            elif key == "mesh":
                cfg.mesh_path = value
            elif key == "resolution":
                cfg.resolution = _integer(lineno, key, value, positive=True)
            elif key == "output":
                cfg.output = value
            elif key == "frames":
                cfg.frames = _integer(lineno, key, value, positive=True)
            elif key == "fps":
                cfg.fps = _number(lineno, key, value, positive=True)
            elif key == "slow_motion":
                cfg.slow_motion = _number(lineno, key, value, positive=True)
            elif key == "gravity":
                parts = value.split()
                if len(parts) != 3:
                    raise ConfigError(f"line {lineno}: gravity needs three numbers")
                cfg.gravity = np.array([_number(lineno, key, x) for x in parts])
            elif key == "seed":
                cfg.seed = _integer(lineno, key, value)
            elif key == "write_meshes":
                cfg.write_meshes = _boolean(lineno, key, value)
        elif section == "material":
            if key in ("poisson_ratio",):
                x = _number(lineno, key, value)
                if not -1.0 < x < 0.5:
                    raise ConfigError(
                        f"line {lineno}: poisson_ratio must lie in (-1, 0.5)"
                    )
                cfg.poisson_ratio = x
            else:
                setattr(cfg, key, _number(lineno, key, value, positive=True))
        elif section == "plasticity":
            plastic_line = lineno
            if key == "enabled":
                plastic_raw["enabled"] = _boolean(lineno, key, value)
            else:
                plastic_raw[key] = _number(lineno, key, value, positive=True)
        elif section == "timestep":
            cfg.dt = _number(lineno, key, value, positive=True)
        elif section == "contact":
            if key.startswith("collider_"):
                cfg.colliders.append(_collider(lineno, value))
            elif key in ("sliding_friction", "rolling_friction"):
                setattr(cfg, key, _number(lineno, key, value, non_negative=True))
            else:
                setattr(cfg, key, _number(lineno, key, value, non_negative=True))
        elif section == "solver":
            if key == "method":
                if value not in _METHODS:
                    raise ConfigError(
                        f"line {lineno}: method must be one of {', '.join(_METHODS)}"
                    )
                cfg.method = value
            elif key == "epsilon":
                cfg.epsilon = "auto" if value == "auto" else _number(
                    lineno, key, value, positive=True
                )
            elif key in ("max_iterations", "pcg_max_iterations", "workers"):
                setattr(cfg, key, _integer(lineno, key, value, positive=True))
            elif key == "penalty_kappa":
                cfg.penalty_kappa = _number(lineno, key, value, positive=True)

    if plastic_raw.get("enabled"):
        try:
            cfg.plastic = PlasticParams(
                fracture_strain=plastic_raw["fracture_strain"],
                yield_strain=plastic_raw["yield_strain"],
                weakening=plastic_raw.get("weakening", 1.0),
                damage_exponent=plastic_raw.get("damage_exponent", 1.0),
            )
        except KeyError as exc:
            raise ConfigError(
                f"line {plastic_line}: plasticity enabled but {exc.args[0]} missing"
            )
        except ValueError as exc:
            raise ConfigError(f"line {plastic_line}: {exc}")

    if cfg.source == "builtin" and not cfg.scene_name:
        raise ConfigError("builtin scene requires 'name' in [scene]")
    if cfg.source == "mesh":
        if not cfg.mesh_path:
            raise ConfigError("mesh scene requires 'mesh' in [scene]")
        if cfg.density is None or cfg.youngs_modulus is None:
            raise ConfigError("mesh scene requires density and youngs_modulus")
        if cfg.poisson_ratio is None and cfg.shear_modulus is None:
            raise ConfigError("mesh scene requires poisson_ratio or shear_modulus")
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    return parse_config(text)


def build_scene(cfg: RunConfig) -> Scene:
    """Instantiate the scene described by a parsed config."""
    if cfg.source == "builtin":
        kwargs = {}
        if cfg.youngs_modulus is not None:
            kwargs["youngs"] = cfg.youngs_modulus
        if cfg.density is not None:
            kwargs["density"] = cfg.density
        if cfg.dt is not None:
            kwargs["dt"] = cfg.dt
        if cfg.scene_name == "free-fall":
            kwargs.pop("youngs", None)
            kwargs.pop("density", None)
        scene = built_in_scene(cfg.scene_name, cfg.resolution, **kwargs)
    else:
        mesh = load_tet_mesh(cfg.mesh_path)
        shear = cfg.shear_modulus
        if shear is None:
            shear = cfg.youngs_modulus / (2.0 * (1.0 + cfg.poisson_ratio))
        elements, bonds = build_elements_and_bonds(
            mesh, cfg.density, cfg.youngs_modulus, shear,
            cfg.tensile_strength or math.inf, cfg.shear_strength or math.inf,
        )
        scene = Scene(
            name=Path(cfg.mesh_path).stem, mesh=mesh, elements=elements,
            bonds=bonds, youngs=cfg.youngs_modulus, shear_modulus=shear,
            density=cfg.density,
        )
        if cfg.dt is not None:
            scene.dt = cfg.dt

    if cfg.source == "builtin":
        if cfg.tensile_strength is not None:
            scene.bonds.tensile_strength[:] = cfg.tensile_strength
        if cfg.shear_strength is not None:
            scene.bonds.shear_strength[:] = cfg.shear_strength
    if cfg.gravity is not None:
        scene.gravity = cfg.gravity.copy()
    if cfg.collision_stiffness is not None:
        scene.k_contact = cfg.collision_stiffness
    if cfg.element_collision_stiffness is not None:
        scene.k_element = cfg.element_collision_stiffness
    if cfg.sliding_friction is not None:
        scene.mu_s = cfg.sliding_friction
    if cfg.rolling_friction is not None:
        scene.mu_r = cfg.rolling_friction
    if cfg.colliders:
        scene.colliders = list(cfg.colliders)
    scene.plastic = cfg.plastic
    scene.bootstrap_history()
    return scene


def solver_config(cfg: RunConfig, scene: Scene) -> SolverConfig:
    eps = scene.default_epsilon() if cfg.epsilon == "auto" else float(cfg.epsilon)
    return SolverConfig(
        epsilon=eps,
        max_iterations=cfg.max_iterations,
        pcg_max_iterations=cfg.pcg_max_iterations,
        workers=cfg.workers,
        penalty_kappa=cfg.penalty_kappa,
    )
