"""Exception hierarchy shared across the package.

Errors are grouped so callers can distinguish "abort the session" failures
(gateway/auth problems) from "this one output was bad" failures (agent
output contract violations), without matching on message strings.
"""

from __future__ import annotations


class TriageError(Exception):
    """Base class for every error raised by this package."""


class TaxonomyError(TriageError):
    """Taxonomy file failed to parse or violated a structural invariant."""


class UnknownDepartment(TriageError):
    """A department name does not resolve in the active taxonomy."""


class DatasetError(TriageError):
    """A dataset file failed to parse or contained an invalid record."""


class KBError(TriageError):
    """A knowledge-base file failed validation (schema, dangling name, duplicate rule)."""


class GatewayError(TriageError):
    """Base class for completion-backend failures."""


class Timeout(GatewayError):
    """The provider did not answer within the configured timeout, retries included."""


class RateLimited(GatewayError):
    """The provider kept rejecting with rate-limit responses after all retries."""


class AuthFailure(GatewayError):
    """Credentials are missing or were rejected; raised before any retry."""


class MalformedProviderResponse(GatewayError):
    """The provider answered but the payload was not a usable completion."""


class MissingFixture(GatewayError):
    """Scripted backend has no recorded reply for the requested exchange."""

    def __init__(self, agent_tag: str, session_id: str, round_: int) -> None:
        super().__init__(
            f"no fixture entry for agent_tag={agent_tag!r} "
            f"session_id={session_id!r} round={round_}"
        )
        self.agent_tag = agent_tag
        self.session_id = session_id
        self.round = round_


class AgentError(TriageError):
    """Base class for agent output-contract failures."""


class UnparseableAgentOutput(AgentError):
    """The agent reply stayed invalid after bounded re-prompting."""


class EmptyDescription(AgentError):
    """The intake stage received an empty patient description."""


class RepetitionUnresolved(AgentError):
    """The question agent kept repeating a prior question after re-prompts."""


class ScoreOutOfRange(AgentError):
    """The evaluator kept returning scores outside the 1..5 scale."""


class RejectUnimputable(TriageError):
    """A raw record lacks the chief complaint and cannot be imputed."""


class ServiceError(TriageError):
    """Session-service failures (unknown session, expired session, bad state)."""
