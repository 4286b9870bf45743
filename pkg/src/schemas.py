from fractions import Fraction
from typing import Dict, List, Literal, Optional, Tuple, get_origin

from pydantic import BaseModel, Extra, Field, root_validator, validator

HP_FIELDS = ("st_lr", "st_momentum", "st_batch", "at_lr", "at_momentum", "at_batch",
             "pgd_alpha", "rat_pct", "ae_pct")
ST_FIELDS = ("st_lr", "st_momentum", "st_batch")
AT_FIELDS = ("at_lr", "at_momentum", "at_batch")
FIDELITY_DIMS = ("epochs", "attack_iters")


def parse_epsilon(value) -> float:
    """
    Parse a perturbation bound given either as an absolute fraction (``0.03``)
    or in the integer-over-255 notation used for image pipelines (``8/255``).

    :param value: str | float: Raw bound
    :return: The bound as an absolute real in [0, 1]
    """
    if isinstance(value, (int, float)):
        eps = float(value)
    else:
        text = str(value).strip()
        try:
            eps = float(Fraction(text)) if "/" in text else float(text)
        except (ValueError, ZeroDivisionError):
            raise ValueError(f"invalid epsilon '{value}'")
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"epsilon {eps} outside [0, 1]")
    return eps


class Epsilon(float):

    @classmethod
    def __get_validators__(cls):
        yield cls.validate

    @classmethod
    def validate(cls, value):
        return parse_epsilon(value)


class HPConfig(BaseModel):
    st_lr: float = Field(gt=0)
    st_momentum: float = Field(ge=0, lt=1)
    st_batch: int = Field(ge=1)
    at_lr: float = Field(gt=0)
    at_momentum: float = Field(ge=0, lt=1)
    at_batch: int = Field(ge=1)
    pgd_alpha: float = Field(gt=0)
    rat_pct: int = Field(ge=0, le=100)
    ae_pct: int = Field(ge=0, le=100)

    class Config:
        frozen = True

    def astuple(self) -> tuple:
        return tuple(getattr(self, name) for name in HP_FIELDS)

    def st_hps(self) -> tuple:
        return tuple(getattr(self, name) for name in ST_FIELDS)

    def at_hps(self) -> tuple:
        return tuple(getattr(self, name) for name in AT_FIELDS)

    @property
    def tied(self) -> bool:
        return self.st_hps() == self.at_hps()


class FidelityPoint(BaseModel):
    epochs: int = Field(ge=1)
    attack_iters: int = Field(ge=1)

    class Config:
        frozen = True

    def astuple(self) -> Tuple[int, int]:
        return self.epochs, self.attack_iters

    def normalized(self, epochs_max: int, iters_max: int) -> Tuple[float, float]:
        return self.epochs / epochs_max, self.attack_iters / iters_max


class AttackSpec(BaseModel):
    epsilon: float = Field(ge=0)
    iters: int = Field(1, ge=1)
    alpha: float = Field(1e-2, gt=0)
    init: Literal["zero", "uniform"] = "zero"
    step_rule: Literal["sign", "raw"] = "sign"

    class Config:
        frozen = True


class EvalRecord(BaseModel):
    config: HPConfig
    fidelity: FidelityPoint
    epsilon: float = Field(ge=0, le=1)
    std_error: float = Field(ge=0, le=1)
    adv_error: float = Field(ge=0, le=1)
    train_time: float = Field(ge=0)
    seed: int

    class Config:
        frozen = True

    @property
    def key(self) -> tuple:
        return (self.config.astuple(), self.fidelity.astuple(), self.epsilon, self.seed)


class ManifestSection(BaseModel):
    """
    Base of every manifest section: unknown keys are rejected and list-valued
    fields accept comma separated text, as written in key-value manifests.
    """

    class Config:
        extra = Extra.forbid

    @root_validator(pre=True)
    def split_lists(cls, values):
        for name, field in cls.__fields__.items():
            raw = values.get(field.alias)
            if isinstance(raw, str) and get_origin(field.outer_type_) in (list, tuple):
                values[field.alias] = [item.strip() for item in raw.split(",") if item.strip()]
        return values

    @classmethod
    def manifest_keys(cls, section: str) -> List[str]:
        return [f"{section}.{name}" for name in cls.__fields__]


class SearchSpace(ManifestSection):
    """
    Discrete candidate sets for every hyper-parameter, the fidelity grids and the
    perturbation bounds. Defaults follow the grids used for the small models.
    With ``tie_phases`` the at_* candidate sets are ignored and the AT phase reuses
    the ST values.
    """
    st_lr: List[float] = [0.1, 0.01]
    st_momentum: List[float] = [0.0, 0.9]
    st_batch: List[int] = [128, 256]
    at_lr: Optional[List[float]] = None
    at_momentum: Optional[List[float]] = None
    at_batch: Optional[List[int]] = None
    pgd_alpha: List[float] = [1e-2, 1e-3]
    rat_pct: List[int] = [0, 30, 50, 70, 100]
    ae_pct: List[int] = [30, 50, 70, 100]
    epochs: List[int] = [1, 2, 4, 8, 16]
    attack_iters: List[int] = [1, 5, 10, 20]
    epsilons: List[Epsilon] = [8 / 255, 12 / 255]
    tie_phases: bool = False
    collapse_inert: bool = True

    @validator("st_lr", "at_lr", "pgd_alpha", each_item=True)
    def positive_rate(cls, v):
        if v <= 0:
            raise ValueError("rates must be strictly positive")
        return v

    @validator("st_momentum", "at_momentum", each_item=True)
    def momentum_range(cls, v):
        if not 0 <= v < 1:
            raise ValueError("momentum must lie in [0, 1)")
        return v

    @validator("st_batch", "at_batch", "epochs", "attack_iters", each_item=True)
    def at_least_one(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @validator("rat_pct", "ae_pct", each_item=True)
    def percentage(cls, v):
        if not 0 <= v <= 100:
            raise ValueError("percentages must lie in [0, 100]")
        return v

    def candidates(self) -> Dict[str, list]:
        """
        Candidate set per HP dimension, with the AT sets resolved against tying.
        """
        values = {name: list(getattr(self, name) or []) for name in HP_FIELDS}
        for st_name, at_name in zip(ST_FIELDS, AT_FIELDS):
            if self.tie_phases or getattr(self, at_name) is None:
                values[at_name] = list(values[st_name])
        return values


class ToyDataSpec(ManifestSection):
    kind: Literal["blobs", "rings"] = "blobs"
    n_features: int = Field(2, ge=2, le=16)
    n_classes: int = Field(3, ge=2)
    n_train: int = Field(512, ge=2)
    n_test: int = Field(256, ge=2)
    spread: float = Field(0.08, gt=0)
    seed: int = 0


class ModelSpec(ManifestSection):
    hidden: int = Field(16, ge=1)
    activation: Literal["tanh", "relu"] = "tanh"


class OptimizerSpec(BaseModel):
    name: Literal["random", "bo_ei", "hyperband", "mf"]
    label: str
    fidelity_dims: Tuple[str, ...] = ()
    eta: int = Field(2, ge=2)
    init_design_size: int = Field(5, ge=2)

    class Config:
        frozen = True

    @validator("fidelity_dims", each_item=True)
    def known_dim(cls, v):
        if v not in FIDELITY_DIMS:
            raise ValueError(f"unknown fidelity dimension '{v}'")
        return v


STANDARD_OPTIMIZERS = {
    "mf-epochs-iters": ("mf", ("epochs", "attack_iters")),
    "mf-epochs": ("mf", ("epochs",)),
    "mf-iters": ("mf", ("attack_iters",)),
    "hyperband": ("hyperband", ()),
    "bo_ei": ("bo_ei", ()),
    "random": ("random", ()),
}


def optimizer_spec(label: str, eta: int = 2, init_design_size: int = 5) -> OptimizerSpec:
    """
    Resolve a label such as ``mf-epochs-iters`` or ``hyperband`` into an OptimizerSpec.

    :param label: str: One of the STANDARD_OPTIMIZERS labels
    :param eta: int: HyperBand reduction factor
    :param init_design_size: int: Size of the initial random design of model based tuners
    :return: The optimizer spec
    """
    if label not in STANDARD_OPTIMIZERS:
        raise ValueError(f"unknown optimizer '{label}', expected one of {sorted(STANDARD_OPTIMIZERS)}")
    name, dims = STANDARD_OPTIMIZERS[label]
    return OptimizerSpec(name=name, label=label, fidelity_dims=dims, eta=eta,
                         init_design_size=init_design_size)


class SweepSection(ManifestSection):
    output: str = "dataset.csv"
    seeds: List[int] = [0]
    cost: Literal["wallclock", "simulated"] = "wallclock"
    resume: bool = True


class AnalyzeSection(ManifestSection):
    dataset: str
    epsilons: Optional[List[Epsilon]] = None
    rat_pct: List[int] = [30, 50, 70]
    cheap_iters: List[int] = [1, 5, 10]
    reference_iters: int = 20
    plots: bool = True


class ReplaySection(ManifestSection):
    dataset: str
    epsilon: Epsilon
    budget: float = Field(gt=0)
    seeds: List[int] = list(range(20))
    optimizers: List[str] = list(STANDARD_OPTIMIZERS)
    mode: Literal["observed", "recommendation", "both"] = "observed"
    alpha_weight: float = Field(0.5, ge=0, le=1)
    hyperband_eta: int = Field(2, ge=2)
    init_design_size: int = Field(5, ge=2)
    plots: bool = True

    @validator("optimizers", each_item=True)
    def known_optimizer(cls, v):
        if v not in STANDARD_OPTIMIZERS:
            raise ValueError(f"unknown optimizer '{v}'")
        return v


class TuneSection(ManifestSection):
    optimizer: str = "mf-epochs-iters"
    budget: float = Field(gt=0)
    epsilon: Epsilon
    seed: int = 0
    train_seed: int = 0
    alpha_weight: float = Field(0.5, ge=0, le=1)
    cost: Literal["wallclock", "simulated"] = "wallclock"
    hyperband_eta: int = Field(2, ge=2)
    init_design_size: int = Field(5, ge=2)

    @validator("optimizer")
    def known_optimizer(cls, v):
        if v not in STANDARD_OPTIMIZERS:
            raise ValueError(f"unknown optimizer '{v}'")
        return v


class RunManifest(BaseModel):
    space: SearchSpace = SearchSpace()
    data: ToyDataSpec = ToyDataSpec()
    model: ModelSpec = ModelSpec()
    sweep: SweepSection = SweepSection()
    analyze: Optional[AnalyzeSection] = None
    replay: Optional[ReplaySection] = None
    tune: Optional[TuneSection] = None

    class Config:
        extra = Extra.forbid

    @classmethod
    def sections(cls) -> Dict[str, type]:
        return {name: field.type_ for name, field in cls.__fields__.items()}

    @classmethod
    def manifest_keys(cls) -> List[str]:
        keys = []
        for section, model in cls.sections().items():
            keys.extend(model.manifest_keys(section))
        return keys
