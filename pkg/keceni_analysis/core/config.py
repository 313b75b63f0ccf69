from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pathlib import Path
import logging
import os
from typing import Any, Dict, Literal, Optional, Union

from keceni_analysis.core.errors import ConfigError

logger = logging.getLogger(__name__)

# Try to load .env file if exists
try:
    from dotenv import load_dotenv
    env_path = Path(__file__).parent.parent.parent / '.env'
    if env_path.exists():
        load_dotenv(env_path)
        logger.info("Loaded .env from %s", env_path)
except ImportError:
    pass  # python-dotenv not installed, skip


def _env_int(key: str, default: int) -> int:
    raw = os.getenv(key, "")
    try:
        return int(raw) if raw.strip() else default
    except ValueError:
        return default


def _env_float(key: str, default: float) -> float:
    raw = os.getenv(key, "")
    try:
        return float(raw) if raw.strip() else default
    except ValueError:
        return default


class Settings(BaseModel):
    VERSION: str = "1.0.0"
    OUTPUT_DIR: Path = Path(os.getenv("KECENI_OUTPUT_DIR", "results"))

    # 并行线程数 (--threads 优先)
    THREADS: int = max(1, _env_int("KECENI_THREADS", 1))
    LOG_LEVEL: str = os.getenv("KECENI_LOG_LEVEL", "INFO").upper()

    # Monte Carlo 积分默认次数
    MC_DRAWS: int = max(1, _env_int("KECENI_MC_DRAWS", 200))
    MC_DRAWS_FULL: int = 50
    # 轮廓空间不超过该值时改用精确枚举
    EXACT_PROFILE_CAP: int = 4096

    # 节点倾向得分截断
    PROPENSITY_EPS: float = _env_float("KECENI_PROPENSITY_EPS", 1e-3)

    HAC_RADIUS: int = 2
    TRANSPORT_CAP: int = 64

    # IRLS
    IRLS_MAX_ITER: int = 100
    IRLS_TOL: float = 1e-8
    IRLS_RIDGE: float = 1e-8
    IRLS_BETA_CAP: float = 1e3

    CV_GRID_SIZE: int = 10


settings = Settings()


class RunConfig(BaseModel):
    """
    一次运行的完整配置
    优先级 (低 -> 高)：内置默认 < 环境变量 (Settings) < --config 文件 < 命令行参数
    """
    model_config = ConfigDict(extra="forbid")

    nodes: Optional[str] = None
    edges: Optional[str] = None
    scenario: Optional[str] = None

    metric: Literal["summary-l1", "wasserstein-treatment"] = "summary-l1"
    empty_policy: Literal["midpoint", "exclude"] = "midpoint"
    kernel: Literal["triangular", "box"] = "triangular"
    bandwidth: Union[float, Literal["cv"]] = "cv"
    cv_grid_size: int = Field(default_factory=lambda: settings.CV_GRID_SIZE)

    mc_draws: int = Field(default_factory=lambda: settings.MC_DRAWS)
    mc_draws_full: int = Field(default_factory=lambda: settings.MC_DRAWS_FULL)
    integration: Literal["auto", "exact", "mc"] = "auto"
    seed: int = 0

    variance: Literal["none", "simple", "full"] = "none"
    hac_radius: int = Field(default_factory=lambda: settings.HAC_RADIUS)
    alpha: float = 0.05

    outcome_model: Literal["linear", "logistic", "kernel", "kernel-wasserstein"] = "linear"
    outcome_map: str = "nodewise-outcome"
    propensity_model: Literal["logistic", "kernel", "kernel-wasserstein"] = "logistic"
    propensity_map: str = "nodewise-propensity"
    alpha_mu: Optional[float] = None
    alpha_pi: Optional[float] = None
    nuisance_bandwidth: Union[float, Literal["median", "loo"]] = "median"
    propensity_eps: float = Field(default_factory=lambda: settings.PROPENSITY_EPS)
    standardize: bool = False

    threads: int = Field(default_factory=lambda: settings.THREADS)
    out: str = Field(default_factory=lambda: str(settings.OUTPUT_DIR))

    @field_validator("mc_draws", "mc_draws_full", "threads", "cv_grid_size")
    @classmethod
    def _at_least_one(cls, v: int):
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @field_validator("hac_radius")
    @classmethod
    def _radius(cls, v: int):
        if v < 0:
            raise ValueError("HAC radius must be non-negative")
        return v

    @field_validator("bandwidth", "nuisance_bandwidth")
    @classmethod
    def _positive_bandwidth(cls, v):
        if isinstance(v, float) and not v > 0:
            raise ValueError("bandwidth must be positive")
        return v

    @field_validator("alpha")
    @classmethod
    def _level(cls, v: float):
        if not 0.0 < v < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        return v

    @field_validator("alpha_mu", "alpha_pi")
    @classmethod
    def _misspecification(cls, v: Optional[float]):
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError("misspecification level must lie in [0, 1]")
        return v


def read_config_file(path) -> Dict[str, str]:
    """平面 key = value 文本；# 开头为注释，键中的 - 视同 _"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def resolve_run_config(config_file=None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    merged: Dict[str, Any] = {}
    if config_file:
        merged.update(read_config_file(config_file))
        if "lambda" in merged:
            merged["bandwidth"] = merged.pop("lambda")
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig(**merged)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
