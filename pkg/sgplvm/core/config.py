"""
Configuration objects and the flat ``key = value`` config file reader.

Config files hold one setting per line, ``#`` starts a comment, and keys are
dotted by section::

    model.d_xi = 5
    model.spatial_family = matern32
    train.optimizer = lbfgs
    layout.spatial_shape = 12, 12
"""
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from sgplvm.core.exceptions import ConfigError


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        return tuple(int(p) for p in parts)
    if isinstance(value, int):
        return (value,)
    return value


class ModelConfig(BaseModel):
    """Model structure: dimensions, kernel families, prior and init values"""

    model_config = ConfigDict(extra="forbid")

    d_xi: int = Field(2, ge=1)
    m_xi: int = Field(20, ge=1)
    # Per spatial factor; None uses every spatial input as an inducing input
    m_s: Optional[Tuple[int, ...]] = None
    prior: Literal["iid", "dynamical"] = "iid"
    spatial_family: Literal["ard_rbf", "matern32", "white"] = "matern32"
    spatial_ard: bool = True
    temporal_family: Literal["ard_rbf", "matern32"] = "ard_rbf"
    temporal_lengthscale: Optional[float] = Field(None, gt=0)
    inducing_init: Literal["kmeans", "random"] = "kmeans"
    init_variance: float = Field(0.1, gt=0)
    beta_init: float = Field(100.0, gt=0)
    jitter: float = Field(1e-6, ge=0)
    optimize_spatial_inducing: bool = False

    @field_validator("m_s", mode="before")
    @classmethod
    def _parse_m_s(cls, value: Any) -> Any:
        return _split_csv(value)


class TrainConfig(BaseModel):
    """Optimizer settings for maximizing the collapsed bound"""

    model_config = ConfigDict(extra="forbid")

    optimizer: Literal["adam", "lbfgs"] = "lbfgs"
    max_iters: int = Field(500, ge=0)
    learning_rate: float = Field(0.05, gt=0)
    lbfgs_history: int = Field(20, ge=1)
    init: Literal["pca", "random"] = "pca"
    fixed_beta_iters: int = Field(100, ge=0)
    seed: int = 0
    tolerance: float = Field(1e-7, gt=0)
    log_every: int = Field(10, ge=1)


class InferConfig(BaseModel):
    """Per-test-case optimizer settings for latent inference"""

    model_config = ConfigDict(extra="forbid")

    optimizer: Literal["adam", "lbfgs"] = "lbfgs"
    max_iters: int = Field(200, ge=0)
    learning_rate: float = Field(0.05, gt=0)
    tolerance: float = Field(1e-6, gt=0)
    restarts: int = Field(5, ge=1)
    init_variance: float = Field(0.1, gt=0)
    n_mog: int = Field(20, ge=1)
    seed: int = 0


class GridLayout(BaseModel):
    """How a data file maps onto the (latent index x spatial grid) structure"""

    model_config = ConfigDict(extra="forbid")

    n_xi: Optional[int] = Field(None, ge=1)
    spatial_shape: Optional[Tuple[int, ...]] = None
    d_y: int = Field(1, ge=1)
    ordering: Literal["xi_major", "spatial_major"] = "xi_major"

    @field_validator("spatial_shape", mode="before")
    @classmethod
    def _parse_shape(cls, value: Any) -> Any:
        return _split_csv(value)


class SynthParams(BaseModel):
    """Generator settings for the synthetic image and video datasets"""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["gp_images", "dynamic_video"] = "gp_images"
    n_train: int = Field(40, ge=1)
    n_test: int = Field(20, ge=0)
    spatial_shape: Tuple[int, ...] = (12, 12)
    d_xi: int = Field(2, ge=1)
    d_y: int = Field(1, ge=1)
    noise_var: float = Field(0.01, ge=0)
    latent_lengthscale: float = Field(1.0, gt=0)
    spatial_lengthscale: float = Field(3.0, gt=0)
    spatial_family: Literal["ard_rbf", "matern32"] = "matern32"
    temporal_lengthscale: float = Field(5.0, gt=0)
    missing_fraction: float = Field(0.5, ge=0, le=1)
    seed: int = 0

    @field_validator("spatial_shape", mode="before")
    @classmethod
    def _parse_shape(cls, value: Any) -> Any:
        return _split_csv(value)


class RunConfig(BaseModel):
    """Everything a command-line run reads from its config file"""

    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    layout: GridLayout = Field(default_factory=GridLayout)
    infer: InferConfig = Field(default_factory=InferConfig)
    synth: SynthParams = Field(default_factory=SynthParams)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        """
        Load and validate a config file.

        Args:
            path: Path to a flat key = value config file

        Returns:
            Validated RunConfig

        Raises:
            ConfigError: If the file is unreadable, malformed or invalid
        """
        try:
            return cls.model_validate(read_config_file(path))
        except ValidationError as exc:
            raise ConfigError(f"Invalid config {path}: {exc}") from exc


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Parse a flat config file into a nested dict keyed by section.

    Args:
        path: Path to the config file

    Returns:
        Nested dict, e.g. {"model": {"d_xi": "5"}}

    Raises:
        ConfigError: On unreadable files or malformed lines
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc

    nested: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        section = nested
        *parents, leaf = key.split(".")
        for name in parents:
            section = section.setdefault(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"{path}:{lineno}: key {key!r} clashes with a value")
        section[leaf] = value
    return nested
