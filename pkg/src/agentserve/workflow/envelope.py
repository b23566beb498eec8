"""Request envelope: identity metadata, injected annotations and runtime state."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

from .pathexpr import PathExpr, parse_path_expr, path_expr_to_text
from .prompt import PromptTemplate, format_template, parse_template


class RequestState(str, Enum):
    QUEUED = "queued"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    PREEMPTED = "preempted"
    COMPLETE = "complete"


@dataclass(frozen=True)
class AppMetadata:
    workflow_type_id: str
    workflow_id: str
    agent_id: str


@dataclass
class SysAnnotations:
    predicted_output_len: tuple  # (lo, hi) tokens
    alpha: float
    predicted_path_regex: PathExpr
    prompt_composition: dict = field(default_factory=dict)  # role -> PromptTemplate

    @property
    def lo(self):
        return self.predicted_output_len[0]

    @property
    def u(self):
        return self.predicted_output_len[1]


@dataclass
class RequestEnvelope:
    request_id: str
    app_metadata: AppMetadata
    prompt_len: int = 0
    model: str = ""
    sys_annotations: SysAnnotations | None = None
    unprofiled: bool = False
    state: RequestState = RequestState.QUEUED
    tokens_generated: int = 0
    position: object = None
    arrival_time: float = 0.0
    enqueue_time: float = 0.0
    base_priority: float = 0.0

    @property
    def workflow_id(self):
        return self.app_metadata.workflow_id

    @property
    def role(self):
        return self.app_metadata.agent_id

    @property
    def annotated(self):
        return self.sys_annotations is not None and not self.unprofiled

    def to_json(self, content: str = "...") -> dict:
        doc = {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "extra_body": {
                "app_metadata": {
                    "workflow_type_id": self.app_metadata.workflow_type_id,
                    "workflow_id": self.app_metadata.workflow_id,
                    "agent_id": self.app_metadata.agent_id,
                },
            },
        }
        ann = self.sys_annotations
        if ann is not None:
            doc["extra_body"]["sys_annotations"] = {
                "predicted_output_len": [int(ann.lo), int(ann.u)],
                "predicted_path_regex": path_expr_to_text(ann.predicted_path_regex),
                "prompt_composition": {r: format_template(t)
                                       for r, t in ann.prompt_composition.items()},
            }
        return doc

    def dumps(self, **kw) -> str:
        return json.dumps(self.to_json(**kw), indent=2)

    @classmethod
    def from_json(cls, doc: dict, request_id: str = "", alpha: float = 0.01) -> "RequestEnvelope":
        """Build an envelope from a request document.

        The document carries no exceedance probability, so ``alpha`` is
        supplied by the caller.
        """
        body = doc.get("extra_body", {})
        meta = body["app_metadata"]
        env = cls(request_id=request_id,
                  app_metadata=AppMetadata(meta["workflow_type_id"], meta["workflow_id"],
                                           meta["agent_id"]),
                  model=doc.get("model", ""))
        ann = body.get("sys_annotations")
        if ann is not None:
            lo, hi = ann["predicted_output_len"]
            comp = {r: parse_template(t) for r, t in ann.get("prompt_composition", {}).items()}
            env.sys_annotations = SysAnnotations((lo, hi), alpha,
                                                 parse_path_expr(ann["predicted_path_regex"]),
                                                 comp)
        else:
            env.unprofiled = True
        return env


__all__ = ["AppMetadata", "PromptTemplate", "RequestEnvelope", "RequestState", "SysAnnotations"]
