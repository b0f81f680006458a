# Define Pydantic models for configuration and structured output
import hashlib
import json
import math
from enum import Enum
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Scenario(str, Enum):
    PURSUIT = "pursuit"
    CONFRONTATION = "confrontation"


class TrainerMode(str, Enum):
    ARAC = "ARAC"    # adaptive beta
    BRAC = "BRAC"    # fixed beta
    BC = "BC"        # supervised fit to the reference policy only
    REF = "REF"      # scripted reference rollout, no learning
    SAC = "SAC"      # beta frozen at 0, references ignored


class ScenarioConfig(BaseModel):
    """Rules of one two-team graph game"""
    model_config = ConfigDict(frozen=True)

    scenario: Scenario = Field(description="Pursuit or confrontation")
    team_size: int = Field(gt=0, description="Agents on our team (m)")
    initial_hp: int = Field(default=3, gt=0, description="Starting HP per agent (confrontation)")
    attack_range: int = Field(default=2, ge=0, description="Maximum hop distance of an attack")
    base_damage: int = Field(default=1, gt=0, description="HP removed by one attack")
    sensing_range: int = Field(default=2, ge=0, description="Reference policy sensing range")
    max_steps: int = Field(default=128, ge=1, description="Episode step limit")
    r_capture: float = Field(default=30.0, description="Reward for capturing the evader")
    r_kill: float = Field(default=3.0, description="Reward per eliminated opponent")
    r_all_kill: float = Field(default=20.0, description="Bonus for eliminating the whole opponent team")

    @field_validator("r_capture", "r_kill", "r_all_kill")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("rewards must be finite")
        return value

    @property
    def opponent_count(self) -> int:
        return 1 if self.scenario == Scenario.PURSUIT else self.team_size

    @property
    def agent_count(self) -> int:
        return self.team_size + self.opponent_count

    @property
    def features_per_agent(self) -> int:
        return 1 if self.scenario == Scenario.PURSUIT else 4

    @property
    def feature_width(self) -> int:
        return self.agent_count * self.features_per_agent


class NetworkConfig(BaseModel):
    """Shapes of the encoder, decoder, pointer actor and critic"""
    model_config = ConfigDict(frozen=True)

    feature_width: int = Field(gt=0, description="Columns of the feature matrix (f)")
    d_model: int = Field(default=64, gt=0, description="Embedding width (d)")
    encoder_layers: int = Field(default=6, ge=1, description="Masked self-attention layers (L)")
    decoder_layers: int = Field(default=1, ge=1, le=1, description="Decoder attention layers")
    attention_heads: int = Field(default=8, ge=1, description="Heads per attention layer")
    ff_multiplier: int = Field(default=4, ge=1, description="Feed-forward hidden width as a multiple of d")
    critic_hidden: int = Field(default=64, gt=0, description="Critic MLP hidden width")
    layer_norm_eps: float = Field(default=1e-5, gt=0)

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d_model % self.attention_heads:
            raise ValueError(f"attention_heads={self.attention_heads} must divide d_model={self.d_model}")
        return self

    @property
    def head_width(self) -> int:
        return self.d_model // self.attention_heads


class RunConfig(BaseModel):
    """Flat run configuration; field names are the config-file keys"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    # scenario
    scenario: Scenario = Scenario.PURSUIT
    team_size: Optional[int] = Field(default=None, gt=0, description="2 for pursuit, 3 for confrontation when unset")
    initial_hp: int = Field(default=3, gt=0)
    base_damage: int = Field(default=1, gt=0)
    attack_range: int = Field(default=2, ge=0)
    sensing_range: int = Field(default=2, ge=0)
    max_steps: int = Field(default=128, ge=1)
    r_capture: float = 30.0
    r_kill: float = 3.0
    r_all_kill: float = 20.0
    map_path: Optional[str] = Field(default=None, description="Map file in the map text format")
    opponent_policy: Literal["scripted", "random"] = Field(default="scripted", description="Training-time opponent")

    # algorithm
    mode: TrainerMode = TrainerMode.ARAC
    optimizer: Literal["adam"] = "adam"
    batch_size: int = Field(default=128, gt=0)
    buffer_size: int = Field(default=2000, gt=0)
    update_every: int = Field(default=1, gt=0, description="Environment steps between network updates")
    learning_rate: float = Field(default=1e-5, gt=0)
    coef_learning_rate: Optional[float] = Field(default=None, gt=0, description="Defaults to learning_rate")
    gamma: float = Field(default=0.99, gt=0, le=1)
    tau: float = Field(default=0.005, gt=0, le=1)
    init_alpha: float = Field(default=0.2, gt=0)
    init_beta: float = Field(default=1.0, gt=0)
    target_entropy_factor: float = Field(default=0.05, ge=0)
    target_kl: float = Field(default=1.0, ge=0)
    kl_statistic: Literal["mean", "sum"] = "mean"

    # network
    encoder_layers: int = Field(default=6, ge=1)
    decoder_layers: int = Field(default=1, ge=1, le=1)
    attention_heads: int = Field(default=8, ge=1)
    d_model: int = Field(default=64, gt=0)
    ff_multiplier: int = Field(default=4, ge=1)
    critic_hidden: int = Field(default=64, gt=0)
    layer_norm_eps: float = Field(default=1e-5, gt=0)

    # orchestration
    episodes: int = Field(default=5000, ge=0)
    eval_every: int = Field(default=100, gt=0)
    eval_episodes: int = Field(default=100, gt=0)
    seed: int = Field(default=0, ge=0)
    output_dir: str = "runs/default"
    workers: int = Field(default=1, ge=1)
    progress: bool = True

    # self-play
    start_checkpoint: Optional[str] = None
    snapshot_every: int = Field(default=100, gt=0)
    selfplay_episodes: int = Field(default=2500, ge=0)
    selfplay_eval_episodes: int = Field(default=100, gt=0)

    @property
    def resolved_team_size(self) -> int:
        if self.team_size is not None:
            return self.team_size
        return 2 if self.scenario == Scenario.PURSUIT else 3

    @property
    def resolved_coef_learning_rate(self) -> float:
        return self.coef_learning_rate if self.coef_learning_rate is not None else self.learning_rate

    def scenario_config(self) -> ScenarioConfig:
        return ScenarioConfig(
            scenario=self.scenario,
            team_size=self.resolved_team_size,
            initial_hp=self.initial_hp,
            attack_range=self.attack_range,
            base_damage=self.base_damage,
            sensing_range=self.sensing_range,
            max_steps=self.max_steps,
            r_capture=self.r_capture,
            r_kill=self.r_kill,
            r_all_kill=self.r_all_kill,
        )

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            feature_width=self.scenario_config().feature_width,
            d_model=self.d_model,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            attention_heads=self.attention_heads,
            ff_multiplier=self.ff_multiplier,
            critic_hidden=self.critic_hidden,
            layer_norm_eps=self.layer_norm_eps,
        )

    def digest(self) -> str:
        return config_digest(self.scenario_config(), self.network_config())

    def to_conf_text(self) -> str:
        """Render as flat key=value text, readable back by main.load_run_config."""
        lines = []
        for key, value in self.model_dump(mode="json").items():
            if value is None:
                continue
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"


def config_digest(scenario: ScenarioConfig, network: NetworkConfig) -> str:
    """SHA-256 over everything that fixes parameter shapes and game semantics."""
    payload = json.dumps(
        {"scenario": scenario.model_dump(mode="json"), "network": network.model_dump(mode="json")},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class TrainMetrics(BaseModel):
    """One row of the metrics stream"""
    episode: int
    step: int
    critic1_loss: Optional[float] = None
    critic2_loss: Optional[float] = None
    policy_loss: Optional[float] = None
    alpha: Optional[float] = None
    beta: Optional[float] = None
    entropy: Optional[float] = None
    kl: Optional[float] = None
    success_rate_eval: Optional[float] = None
    target_entropy: Optional[float] = None
    skipped: bool = Field(default=False, exclude=True, description="Set when the buffer was smaller than a batch")
    batch_size: int = Field(default=0, exclude=True)


METRICS_COLUMNS = [
    "episode", "step", "critic1_loss", "critic2_loss", "policy_loss",
    "alpha", "beta", "entropy", "kl", "success_rate_eval", "target_entropy",
]


class EvalReport(BaseModel):
    """Greedy-policy evaluation outcome"""
    success_rate: float = Field(ge=0.0, le=1.0)
    episodes: int = Field(ge=0)
    successes: int = Field(ge=0)
    seeds: List[int] = Field(default_factory=list, description="Per-episode reset seeds")
    outcomes: List[str] = Field(default_factory=list, description="Winner per episode")
    map_digest: Optional[str] = None

    @model_validator(mode="after")
    def _exact_ratio(self):
        expected = self.successes / self.episodes if self.episodes else 0.0
        if self.success_rate != expected:
            raise ValueError("success_rate must equal successes / episodes")
        return self


class SelfPlayReport(BaseModel):
    """Self-play curve against the starting policy and pairwise snapshot matches"""
    curve: List[float] = Field(default_factory=list,
                               description="Score vs the starting policy per refresh; a draw counts half a win")
    snapshot_episodes: List[int] = Field(default_factory=list, description="Training episode index of each archived snapshot")
    eval_episodes: int = 0
    wins: List[List[int]] = Field(default_factory=list)
    draws: List[List[int]] = Field(default_factory=list)
    losses: List[List[int]] = Field(default_factory=list)

    def winrate(self) -> List[List[float]]:
        if not self.eval_episodes:
            return []
        return [[w / self.eval_episodes for w in row] for row in self.wins]


class CertificateReport(BaseModel):
    """Numerical certificate for the contraction and improvement theorems"""
    instances: int
    seed: int
    instance_seeds: List[int]
    gamma: float
    alpha: float
    beta: float
    max_contraction_ratio: float
    min_improvement_margin: float
    max_trace_decrease: float
    iterations: List[int]
    runtime_seconds: float
    tolerance: float = 1e-9

    @property
    def contraction_holds(self) -> bool:
        return self.max_contraction_ratio <= self.gamma + self.tolerance

    @property
    def improvement_holds(self) -> bool:
        return self.min_improvement_margin >= -self.tolerance and self.max_trace_decrease <= self.tolerance

    @property
    def passed(self) -> bool:
        return self.contraction_holds and self.improvement_holds


class CheckpointEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int


class CheckpointHeader(BaseModel):
    """JSON header line of a checkpoint file"""
    format_version: int = 1
    config_digest: str
    scenario: ScenarioConfig
    network: NetworkConfig
    entries: List[CheckpointEntry] = Field(default_factory=list)
