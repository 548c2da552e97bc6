"""Shared test stubs."""

import json

from triage.domain import DepartmentRef, Recommendation
from triage.llm_gateway import CompletionResult
from triage.orchestrator import SessionTrace


def label_trace(sid, preds, state="completed"):
    """A minimal completed trace carrying only per-round best predictions.

    ``preds`` is a list of (primary, secondary) tuples, one per round.
    """
    trace = SessionTrace(session_id=sid, config={})
    trace.recommendations = [
        Recommendation(round=i + 1, best=DepartmentRef(p, s), rationale="label")
        for i, (p, s) in enumerate(preds)
    ]
    trace.state = state
    return trace


class ListBackend:
    """Deterministic backend returning canned replies in order."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = 0
        self.exchanges = []

    def complete(self, exchange):
        self.exchanges.append(exchange)
        if self.calls >= len(self.replies):
            raise AssertionError("backend exhausted: more completions requested than scripted")
        reply = self.replies[self.calls]
        self.calls += 1
        return CompletionResult(text=reply, attempt=1)


def fenced(payload) -> str:
    return "```json\n" + json.dumps(payload, ensure_ascii=False) + "\n```"


def recipient_reply(narrative, sections=None, new_facts=(), superseded=()):
    return fenced(
        {
            "narrative": narrative,
            "sections": sections or {},
            "new_facts": list(new_facts),
            "superseded": list(superseded),
        }
    )


def department_reply(best, ambiguous=False, candidates=(), rationale="fits the findings"):
    return fenced(
        {
            "best": best,
            "ambiguous": ambiguous,
            "candidates": list(candidates),
            "rationale": rationale,
        }
    )


def inquirer_reply(question, tags=()):
    return fenced({"question": question, "intent_tags": list(tags)})


def patient_reply_text(reply):
    return fenced({"reply": reply})


def evaluator_reply(scores, justifications=None):
    return fenced(
        {
            "scores": scores,
            "justifications": justifications
            or {k: "justified" for k in scores},
        }
    )
