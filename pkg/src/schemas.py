from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Mechanism = Literal["zeros", "zeros_naive", "zeros_sm", "softmax", "linattn_elu"]
LogitKind = Literal["deviation", "linear", "quadratic", "averaging"]
TaskName = Literal["mqar", "selective_copy", "memorize"]

# Mechanisms that carry no rotary angles of their own
NO_ROPE_MECHANISMS = ("zeros_sm", "linattn_elu")


# Attention / model
class AttentionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d_model: int = Field(64, ge=1)
    n_heads: int = Field(1, ge=1)
    mechanism: Mechanism = "zeros"
    causal: bool = True
    use_rope: bool = True
    include_zero_order: bool = False
    sqrt_decay: bool = False
    clamp_S: float = Field(20.0, gt=0)
    norm_eps: float = Field(1e-5, gt=0)
    rope_base: float = Field(10000.0, gt=1)
    logit_kind: LogitKind = "deviation"
    use_angular: bool = True  # False: cos(theta) fixed at 1
    use_radial: bool = True  # False: weights fixed at 1/t
    use_block_norm: bool = True  # pre-LN before attention and FFN
    use_delta_norm: bool = True  # LN on concatenated heads, linear mechanisms only

    @model_validator(mode="after")
    def check_heads(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.rope_active and self.head_dim % 2:
            raise ValueError(f"head_dim {self.head_dim} must be even when use_rope is set")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rope_active(self) -> bool:
        return self.use_rope and self.mechanism not in NO_ROPE_MECHANISMS


class ModelConfig(AttentionConfig):
    vocab_size: int = Field(16, ge=1)
    n_layers: int = Field(1, ge=0)
    max_seq_len: int = Field(64, ge=1)
    seed: int = Field(0, ge=0)

    def attention(self) -> AttentionConfig:
        return AttentionConfig(**self.model_dump(include=set(AttentionConfig.model_fields)))


# Tasks
class MqarConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    vocab_size: int = Field(64, ge=4)
    n_kv_pairs: int = Field(8, ge=1)
    seq_len: int = Field(64, ge=2)
    n_queries: int = Field(8, ge=0)
    batch_size: int = Field(32, ge=1)
    interleaved: bool = False  # queries anywhere after their own pair
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_layout(self):
        if 2 * self.n_kv_pairs + self.n_queries > self.seq_len:
            raise ValueError(
                f"2*n_kv_pairs + n_queries = {2 * self.n_kv_pairs + self.n_queries} exceeds seq_len {self.seq_len}"
            )
        if self.n_kv_pairs > self.vocab_size // 2 - 1:
            raise ValueError(f"{self.n_kv_pairs} distinct keys do not fit in vocab {self.vocab_size}")
        return self


class SelectiveCopyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    vocab_size: int = Field(16, ge=3)
    n_tokens_to_copy: int = Field(4, ge=1)
    seq_len: int = Field(32, ge=2)
    batch_size: int = Field(32, ge=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_layout(self):
        if self.seq_len < 2 * self.n_tokens_to_copy:
            raise ValueError(f"seq_len {self.seq_len} cannot hold {self.n_tokens_to_copy} tokens twice")
        return self


class MemorizeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    vocab_size: int = Field(16, ge=1)
    seq_len: int = Field(16, ge=1)
    batch_size: int = Field(32, ge=1)
    mapping_seed: int = Field(0, ge=0)
    identity: bool = False
    seed: int = Field(0, ge=0)


TaskConfig = MqarConfig | SelectiveCopyConfig | MemorizeConfig

TASK_CONFIGS: dict[str, type[BaseModel]] = {
    "mqar": MqarConfig,
    "selective_copy": SelectiveCopyConfig,
    "memorize": MemorizeConfig,
}


# Training
class AdamConfig(BaseModel):
    lr: float = Field(3e-4, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(0.01, ge=0)
    grad_clip: float | None = Field(1.0, gt=0)
    eps: float = Field(1e-8, gt=0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "run"
    task: TaskName
    task_params: TaskConfig
    model: ModelConfig
    lr: float = Field(3e-4, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(0.01, ge=0)
    steps: int = Field(1000, ge=0)
    batch_size: int = Field(32, ge=1)
    eval_every: int = Field(100, ge=1)
    eval_batches: int = Field(4, ge=1)
    grad_clip: float = Field(1.0, gt=0)
    warmup_frac: float = Field(0.05, ge=0, le=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="before")
    @classmethod
    def typed_task_params(cls, data):
        if isinstance(data, dict) and isinstance(data.get("task_params"), dict):
            task = data.get("task")
            if task not in TASK_CONFIGS:
                raise ValueError(f"unknown task {task!r}")
            data = {**data, "task_params": TASK_CONFIGS[task].model_validate(data["task_params"])}
        return data

    @field_validator("betas")
    @classmethod
    def check_betas(cls, betas):
        if not all(0 <= b < 1 for b in betas):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        return betas

    @model_validator(mode="after")
    def check_fit(self):
        if not isinstance(self.task_params, TASK_CONFIGS[self.task]):
            raise ValueError(f"task_params do not describe task {self.task!r}")
        if self.task_params.vocab_size > self.model.vocab_size:
            raise ValueError(
                f"task vocab {self.task_params.vocab_size} exceeds model vocab {self.model.vocab_size}"
            )
        if self.task_params.seq_len > self.model.max_seq_len:
            raise ValueError(
                f"task seq_len {self.task_params.seq_len} exceeds max_seq_len {self.model.max_seq_len}"
            )
        return self

    def optimizer(self) -> AdamConfig:
        return AdamConfig(lr=self.lr, betas=self.betas, weight_decay=self.weight_decay, grad_clip=self.grad_clip)


# Records
class MetricsRecord(BaseModel):
    step: int
    train_loss: float
    eval_accuracy: float
    wall_ms: float
    grad_norm: float


class EvalReport(BaseModel):
    task: TaskName
    accuracy: float
    n_batches: int
    n_masked: int
    empty_mask: bool = False


class BenchReport(BaseModel):
    mechanism: str
    seq_len: int
    d_model: int
    mean_ms: float
    median_ms: float
    std_ms: float
    peak_state_bytes: int
    reps: int = Field(ge=5)


# Column order of the bench CSV
BENCH_COLUMNS = tuple(BenchReport.model_fields)


class InvariantResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""
