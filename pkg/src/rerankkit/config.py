"""Pipeline configuration, loaded from YAML and validated strictly (unknown keys are errors)."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, model_validator

from rerankkit.acquisition import DEFAULT_REWRITE_RATE, RerankEndpoint, SearchProvider, provider_from_preset
from rerankkit.errors import ValidationError
from rerankkit.judges import DEFAULT_RUBRIC, JudgeSpec
from rerankkit.protocol import DEFAULT_INSTRUCTION, DEFAULT_SYSTEM_PROMPT
from rerankkit.transport import ChatEndpoint


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EndpointConfig(_Strict):
    """A chat-completion endpoint. Secrets are named by env var, never inlined."""

    url: str
    model: str
    api_key_env_var: Optional[str] = None
    max_concurrent: int = Field(4, ge=1)
    timeout_ms: int = Field(60_000, ge=1)
    temperature: float = 0.0
    max_attempts: int = Field(4, ge=1)
    initial_backoff_s: float = Field(1.0, ge=0)

    def build(self) -> ChatEndpoint:
        return ChatEndpoint(
            endpoint_url=self.url,
            model_name=self.model,
            api_key_env_var=self.api_key_env_var,
            max_concurrent=self.max_concurrent,
            timeout_ms=self.timeout_ms,
            temperature=self.temperature,
            max_attempts=self.max_attempts,
            initial_backoff_s=self.initial_backoff_s,
        )


class JudgeConfig(_Strict):
    judge_id: str = Field(min_length=1)
    url: str
    model: str
    api_key_env_var: Optional[str] = None
    max_concurrent: int = Field(4, ge=1)
    timeout_ms: int = Field(60_000, ge=1)
    max_attempts: int = Field(4, ge=1)
    initial_backoff_s: float = Field(1.0, ge=0)

    def build(self) -> JudgeSpec:
        return JudgeSpec(
            judge_id=self.judge_id,
            endpoint_url=self.url,
            model_name=self.model,
            api_key_env_var=self.api_key_env_var,
            max_concurrent=self.max_concurrent,
            timeout_ms=self.timeout_ms,
            max_attempts=self.max_attempts,
            initial_backoff_s=self.initial_backoff_s,
        )


class JudgesSection(_Strict):
    panel: list[JudgeConfig] = Field(default_factory=list)
    rubric: str = DEFAULT_RUBRIC
    cache_path: Optional[str] = None
    threshold: Optional[int] = Field(None, ge=1)
    short_circuit: bool = False
    panel_size: int = Field(5, ge=2)

    @model_validator(mode="after")
    def _check(self) -> "JudgesSection":
        ids = [j.judge_id for j in self.panel]
        if len(set(ids)) != len(ids):
            raise ValueError("judge_id values must be unique")
        if self.threshold is not None and self.panel and self.threshold > len(self.panel):
            raise ValueError("threshold exceeds panel size")
        if not self.rubric.strip():
            raise ValueError("rubric must be non-empty")
        return self


class TeacherConfig(_Strict):
    url: Optional[str] = None
    model: Optional[str] = None
    api_key_env_var: Optional[str] = None
    auth_header: str = "Authorization"
    auth_scheme: Optional[str] = "Bearer"
    query_field: str = "query"
    documents_field: str = "documents"
    model_field: str = "model"
    results_field: str = "results"
    score_field: str = "relevance_score"
    index_field: str = "index"
    extra_body: dict = Field(default_factory=dict)
    timeout_ms: int = Field(30_000, ge=1)
    max_attempts: int = Field(4, ge=1)
    initial_backoff_s: float = Field(1.0, ge=0)
    cached_scores_path: Optional[str] = None

    def build(self) -> RerankEndpoint | None:
        if self.url is None:
            return None
        fields = self.model_dump(exclude={"cached_scores_path"})
        return RerankEndpoint(**fields)


class ProviderConfig(_Strict):
    name: str
    preset: Optional[str] = None
    url: Optional[str] = None
    api_key_env_var: Optional[str] = None
    auth_header: Optional[str] = None
    auth_scheme: Optional[str] = None
    query_field: Optional[str] = None
    top_k_field: Optional[str] = None
    extra_body: Optional[dict] = None
    results_field: Optional[str] = None
    content_fields: Optional[list[str]] = None
    url_field: Optional[str] = None
    title_field: Optional[str] = None
    timeout_ms: Optional[int] = Field(None, ge=1)
    max_attempts: Optional[int] = Field(None, ge=1)

    def build(self) -> SearchProvider:
        overrides = {k: v for k, v in self.model_dump(exclude={"name", "preset"}).items() if v is not None}
        if "content_fields" in overrides:
            overrides["content_fields"] = tuple(overrides["content_fields"])
        if self.preset:
            return replace(provider_from_preset(self.preset, **overrides), name=self.name)
        if "url" not in overrides:
            raise ValidationError(f"provider {self.name!r} needs a url or a preset")
        return SearchProvider(name=self.name, **overrides)


class AcquisitionSection(_Strict):
    providers: list[ProviderConfig] = Field(default_factory=list)
    top_k: int = Field(5, ge=1)
    rewriter: Optional[EndpointConfig] = None
    rewrite_rate: float = Field(DEFAULT_REWRITE_RATE, ge=0, le=1)
    generator: Optional[EndpointConfig] = None
    generator_attempts: int = Field(3, ge=1)
    per_dataset_cap: Optional[int] = Field(None, ge=1)
    dataset_key: str = "dataset"


class ProtocolSection(_Strict):
    instruction: str = DEFAULT_INSTRUCTION
    system_prompt: str = DEFAULT_SYSTEM_PROMPT


class BalanceSection(_Strict):
    target_h: float = Field(0.99, gt=0, le=1)


class SplitSection(_Strict):
    dev_fraction: float = Field(0.1, gt=0, lt=1)
    seed: Optional[int] = None


class EvalSection(_Strict):
    k: int = Field(10, ge=1)
    force_insert: bool = False
    depth: int = Field(100, ge=1)
    extractor: Optional[EndpointConfig] = None
    quality_judge: Optional[EndpointConfig] = None
    quality_attempts: int = Field(3, ge=1)


class LossSection(_Strict):
    gamma_point: float = Field(20.0, gt=0)
    gamma_sft: float = Field(1.0, gt=0)
    temperature: float = Field(2.0, gt=0)
    kl_direction: Literal["teacher_student", "student_teacher"] = "teacher_student"
    infonce_eps: float = Field(0.05, gt=0, le=1)


class TransportSection(_Strict):
    mode: Literal["live", "replay"] = "live"
    transcripts_path: Optional[str] = None
    record_path: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> "TransportSection":
        if self.mode == "replay" and not self.transcripts_path:
            raise ValueError("replay mode needs transcripts_path")
        return self


class PipelineConfig(_Strict):
    seed: int = 0
    cache_dir: str = ".rerankkit-cache"
    tokenizer: str = "proxy"
    transport: TransportSection = TransportSection()
    protocol: ProtocolSection = ProtocolSection()
    teacher: TeacherConfig = TeacherConfig()
    judges: JudgesSection = JudgesSection()
    acquisition: AcquisitionSection = AcquisitionSection()
    balance: BalanceSection = BalanceSection()
    split: SplitSection = SplitSection()
    eval: EvalSection = EvalSection()
    loss: LossSection = LossSection()

    def with_overrides(self, *, seed: int | None = None, cache_dir: str | None = None) -> "PipelineConfig":
        update = {}
        if seed is not None:
            update["seed"] = seed
        if cache_dir is not None:
            update["cache_dir"] = cache_dir
        return self.model_copy(update=update)

    @property
    def split_seed(self) -> int:
        return self.split.seed if self.split.seed is not None else self.seed


def _format_pydantic(exc: PydanticValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(data: dict | None) -> PipelineConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValidationError("config must be a mapping at the top level")
    try:
        return PipelineConfig.model_validate(data)
    except PydanticValidationError as exc:
        raise ValidationError(f"invalid config: {_format_pydantic(exc)}") from None


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: not valid YAML: {exc}") from None
    return parse_config(data)
