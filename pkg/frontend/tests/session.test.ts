// Console core against a scripted mock service: a full four-round session,
// duplicate-submit protection, rollback, and idempotent resend.

import { describe, expect, it } from "vitest";

import {
  DepartmentRef,
  Recommendation,
  TriageApi,
  displayDepartment,
} from "../src/api.js";
import {
  ConsoleSessionView,
  roundBadge,
  startSession,
  submitAnswer,
} from "../src/session.js";

const NEURO: DepartmentRef = { primary: "Internal Medicine", secondary: "Neurology" };
const NSURG: DepartmentRef = { primary: "Surgery", secondary: "Neurosurgery" };

const QUESTIONS = [
  "Is there any history of head trauma or injury?",
  "Is the headache accompanied by projectile vomiting?",
  "Does light or noise make it worse?",
];

function recommendationFor(round: number): Recommendation {
  return {
    best: round < 2 ? NSURG : NEURO,
    candidates: round === 1 ? [NSURG, NEURO] : [],
    round,
    rationale: "mock rationale",
    ambiguous: round === 1,
  };
}

interface MockOptions {
  rounds?: number;
  failFirstMessage?: boolean;
  dropFirstResponse?: boolean;
}

/** Scripted stand-in for the session service, faithful to its API shapes. */
class MockServer {
  round = 0;
  rounds: number;
  state = "awaiting_input";
  turns: Array<{ round: number; speaker: string; text: string }> = [];
  messageCalls = 0;
  failNext: boolean;
  dropNextResponse: boolean;
  private processed = new Map<string, unknown>();

  constructor(options: MockOptions = {}) {
    this.rounds = options.rounds ?? 4;
    this.failNext = options.failFirstMessage ?? false;
    this.dropNextResponse = options.dropFirstResponse ?? false;
  }

  fetch = async (url: string, init?: RequestInit): Promise<Response> => {
    const body = init?.body ? JSON.parse(String(init.body)) : {};
    if (url.endsWith("/api/v1/sessions") && init?.method === "POST") {
      if (body.rounds) this.rounds = body.rounds;
      return json({ session_id: "mock-session", first_prompt: "Describe your complaint." });
    }
    if (url.includes("/message")) {
      this.messageCalls += 1;
      if (this.failNext) {
        this.failNext = false;
        return json({ detail: "mock backend unavailable" }, 502);
      }
      const key = body.idempotency_key as string;
      if (key && this.processed.has(key)) {
        return json(this.processed.get(key));
      }
      this.round += 1;
      this.turns.push({ round: this.round, speaker: "patient", text: body.text });
      const finished = this.round >= this.rounds;
      if (!finished) {
        this.turns.push({
          round: this.round,
          speaker: "system",
          text: QUESTIONS[(this.round - 1) % QUESTIONS.length],
        });
      }
      this.state = finished ? "completed" : "awaiting_input";
      const payload = {
        question: finished ? null : QUESTIONS[(this.round - 1) % QUESTIONS.length],
        recommendation: recommendationFor(this.round),
        round: this.round,
        state: this.state,
      };
      if (key) this.processed.set(key, payload);
      if (this.dropNextResponse) {
        // the server processed the round, but the reply never reaches the
        // client (network timeout)
        this.dropNextResponse = false;
        throw new Error("response timed out");
      }
      return json(payload);
    }
    if (url.includes("/api/v1/sessions/")) {
      return json({
        session_id: "mock-session",
        state: this.state,
        round: this.round,
        created: "2026-01-01T00:00:00+00:00",
        updated: "2026-01-01T00:00:00+00:00",
        trace: {
          turns: this.turns,
          hpis: [
            {
              narrative: this.turns
                .filter((t) => t.speaker === "patient")
                .map((t) => t.text)
                .join(" "),
              sections: { chief_complaint: this.turns[0]?.text ?? "" },
            },
          ],
          recommendations: [],
        },
      });
    }
    return json({ detail: "not found" }, 404);
  };
}

function json(payload: unknown, status = 200): Response {
  return new Response(JSON.stringify(payload), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

function apiFor(server: MockServer): TriageApi {
  return new TriageApi("http://mock", server.fetch);
}

async function drive(
  view: ConsoleSessionView,
  api: TriageApi,
  answers: string[],
): Promise<ConsoleSessionView> {
  let current = view;
  for (const answer of answers) {
    current = await submitAnswer(current, answer, api);
  }
  return current;
}

describe("startSession", () => {
  it("opens with round badge 1 and an empty transcript", async () => {
    const api = apiFor(new MockServer());
    const view = await startSession(api);
    expect(view.state).toBe("awaiting_input");
    expect(roundBadge(view)).toBe(1);
    expect(view.transcript).toEqual([]);
    expect(view.currentQuestion).toBe("Describe your complaint.");
  });

  it("turns an unreachable server into an error state, not a crash", async () => {
    const api = new TriageApi("http://mock", async () => {
      throw new Error("ECONNREFUSED");
    });
    const view = await startSession(api);
    expect(view.state).toBe("error");
    expect(view.error).toContain("ECONNREFUSED");
  });

  it("caps the badge at a custom round budget", async () => {
    const server = new MockServer({ rounds: 2 });
    const api = apiFor(server);
    let view = await startSession(api, { rounds: 2 });
    view = await drive(view, api, ["headache", "no trauma"]);
    expect(view.state).toBe("completed");
    expect(roundBadge(view)).toBe(2);
  });
});

describe("submitAnswer", () => {
  it("completes a scripted four-round session with the mock's final best", async () => {
    const server = new MockServer();
    const api = apiFor(server);
    let view = await startSession(api);

    const bests: string[] = [];
    for (const answer of ["headache", "no trauma", "yes vomiting", "nothing else"]) {
      view = await submitAnswer(view, answer, api);
      expect(view.liveRecommendation).not.toBeNull();
      bests.push(displayDepartment(view.liveRecommendation!.best));
    }
    // the recommendation panel moved as rounds progressed
    expect(bests).toEqual([
      "Surgery / Neurosurgery",
      "Internal Medicine / Neurology",
      "Internal Medicine / Neurology",
      "Internal Medicine / Neurology",
    ]);
    expect(view.state).toBe("completed");
    expect(view.finalBanner).toEqual(recommendationFor(4).best);
    expect(view.transcript.filter((t) => t.speaker === "patient")).toHaveLength(4);
    expect(view.hpiPanel).not.toBeNull();
  });

  it("shows candidates only while the decision is ambiguous", async () => {
    const server = new MockServer();
    const api = apiFor(server);
    let view = await startSession(api);
    view = await submitAnswer(view, "headache", api);
    expect(view.liveRecommendation!.ambiguous).toBe(true);
    expect(view.liveRecommendation!.candidates).toHaveLength(2);
    view = await submitAnswer(view, "no trauma", api);
    expect(view.liveRecommendation!.ambiguous).toBe(false);
  });

  it("ignores a duplicate submit while processing", async () => {
    const server = new MockServer();
    const api = apiFor(server);
    const view = await startSession(api);

    let optimistic: ConsoleSessionView | null = null;
    const first = submitAnswer(view, "headache", api, (pending) => {
      optimistic = pending;
    });
    // the user mashes send before the response lands
    const duplicate = await submitAnswer(optimistic!, "headache", api);
    expect(duplicate).toBe(optimistic); // unchanged view, no second request
    await first;
    expect(server.messageCalls).toBe(1);
  });

  it("rolls back the optimistic append on server failure", async () => {
    const server = new MockServer({ failFirstMessage: true });
    const api = apiFor(server);
    let view = await startSession(api);
    view = await submitAnswer(view, "headache", api);
    expect(view.state).toBe("awaiting_input");
    expect(view.error).toContain("mock backend unavailable");
    expect(view.transcript).toEqual([]); // optimistic entry rolled back
    expect(view.round).toBe(0);
  });

  it("advances a single round when a resend follows a lost response", async () => {
    // the server processes round 1 but the reply times out in transit
    const server = new MockServer({ dropFirstResponse: true });
    const api = apiFor(server);
    let view = await startSession(api);
    view = await submitAnswer(view, "headache", api); // times out, rolls back
    expect(view.round).toBe(0);
    expect(view.error).toContain("timed out");
    view = await submitAnswer(view, "headache", api); // resend reuses the key
    expect(view.round).toBe(1);
    expect(server.round).toBe(1); // idempotency key prevented a second advance
    expect(server.messageCalls).toBe(2);
  });

  it("keeps the transcript in server order after retries", async () => {
    const server = new MockServer({ failFirstMessage: true });
    const api = apiFor(server);
    let view = await startSession(api);
    view = await submitAnswer(view, "headache", api); // rollback
    view = await drive(view, api, ["headache", "no trauma"]);
    const got = view.transcript.map((t) => `${t.speaker}:${t.text}`);
    const server_order = server.turns.map((t) => `${t.speaker}:${t.text}`);
    expect(got).toEqual(server_order);
  });

  it("never invents department names beyond the server payload", async () => {
    const server = new MockServer();
    const api = apiFor(server);
    let view = await startSession(api);
    view = await submitAnswer(view, "headache", api);
    const shown = [
      displayDepartment(view.liveRecommendation!.best),
      ...view.liveRecommendation!.candidates.map(displayDepartment),
    ];
    const served = [NSURG, NEURO].map(displayDepartment);
    for (const name of shown) {
      expect(served).toContain(name);
    }
  });

  it("ignores blank input", async () => {
    const server = new MockServer();
    const api = apiFor(server);
    const view = await startSession(api);
    const after = await submitAnswer(view, "   ", api);
    expect(after).toBe(view);
    expect(server.messageCalls).toBe(0);
  });
});
