// Console session state: an immutable view updated by startSession /
// submitAnswer. Submissions append optimistically, roll back on failure,
// and reuse a deterministic idempotency key per round so a retry after a
// timeout can never advance the round twice.

import {
  DepartmentRef,
  Recommendation,
  TriageApi,
  TraceView,
} from "./api.js";

export interface TranscriptEntry {
  round: number;
  speaker: "patient" | "system";
  text: string;
  pending?: boolean;
}

export type SessionState =
  | "idle"
  | "awaiting_input"
  | "processing"
  | "completed"
  | "aborted"
  | "expired"
  | "error";

export interface ConsoleSessionView {
  sessionId: string | null;
  rounds: number | null;
  state: SessionState;
  round: number; // last completed server round
  transcript: TranscriptEntry[];
  currentQuestion: string | null;
  liveRecommendation: Recommendation | null;
  hpiPanel: Record<string, string> | null;
  finalBanner: DepartmentRef | null;
  error: string | null;
}

export interface StartOptions {
  rounds?: number;
}

export function roundBadge(view: ConsoleSessionView): number {
  // the badge names the round currently on screen: the one being gathered
  // while awaiting input, the final one once the session is over
  if (view.state === "completed" || view.state === "aborted") {
    return Math.max(view.round, 1);
  }
  const next = view.round + 1;
  return view.rounds === null ? next : Math.min(next, view.rounds);
}

export function emptyView(): ConsoleSessionView {
  return {
    sessionId: null,
    rounds: null,
    state: "idle",
    round: 0,
    transcript: [],
    currentQuestion: null,
    liveRecommendation: null,
    hpiPanel: null,
    finalBanner: null,
    error: null,
  };
}

function errorMessage(err: unknown): string {
  return err instanceof Error ? err.message : String(err);
}

export async function startSession(
  api: TriageApi,
  options: StartOptions = {},
): Promise<ConsoleSessionView> {
  const view = emptyView();
  view.rounds = options.rounds ?? null;
  try {
    const created = await api.createSession(options.rounds);
    return {
      ...view,
      sessionId: created.session_id,
      state: "awaiting_input",
      currentQuestion: created.first_prompt,
    };
  } catch (err) {
    // non-destructive: the caller can retry startSession
    return { ...view, state: "error", error: errorMessage(err) };
  }
}

function idempotencyKeyFor(view: ConsoleSessionView): string {
  return `${view.sessionId}:round:${view.round + 1}`;
}

function transcriptFromTrace(trace: TraceView): TranscriptEntry[] {
  return trace.trace.turns.map((turn) => ({
    round: turn.round,
    speaker: turn.speaker,
    text: turn.text,
  }));
}

function hpiFromTrace(trace: TraceView): Record<string, string> | null {
  const hpis = trace.trace.hpis;
  if (!hpis.length) return null;
  const latest = hpis[hpis.length - 1];
  const sections: Record<string, string> = {};
  for (const [name, value] of Object.entries(latest.sections)) {
    if (value) sections[name] = value;
  }
  if (latest.narrative) sections["narrative"] = latest.narrative;
  return sections;
}

export async function submitAnswer(
  view: ConsoleSessionView,
  text: string,
  api: TriageApi,
  onOptimistic?: (pending: ConsoleSessionView) => void,
): Promise<ConsoleSessionView> {
  if (view.state !== "awaiting_input" || view.sessionId === null) {
    // duplicate submit while processing (or a finished session): ignore
    return view;
  }
  const trimmed = text.trim();
  if (!trimmed) return view;

  const optimistic: ConsoleSessionView = {
    ...view,
    state: "processing",
    error: null,
    transcript: [
      ...view.transcript,
      { round: view.round + 1, speaker: "patient", text: trimmed, pending: true },
    ],
  };
  onOptimistic?.(optimistic);

  const key = idempotencyKeyFor(view);
  try {
    const response = await api.sendMessage(view.sessionId, trimmed, key);
    const trace = await api.getTrace(view.sessionId);
    const completed = response.state === "completed";
    return {
      ...optimistic,
      state: response.state as SessionState,
      round: response.round,
      transcript: transcriptFromTrace(trace), // server ordering wins
      currentQuestion: response.question,
      liveRecommendation: response.recommendation,
      hpiPanel: hpiFromTrace(trace),
      finalBanner:
        completed && response.recommendation ? response.recommendation.best : null,
    };
  } catch (err) {
    // roll back the optimistic append; the same key is reused on retry
    return {
      ...view,
      state: "awaiting_input",
      error: errorMessage(err),
    };
  }
}
