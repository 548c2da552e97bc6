// Typed client for the triage session HTTP API.

export interface DepartmentRef {
  primary: string;
  secondary: string | null;
}

export interface Recommendation {
  best: DepartmentRef;
  candidates: DepartmentRef[];
  round: number;
  rationale: string;
  ambiguous: boolean;
}

export interface CreateSessionResponse {
  session_id: string;
  first_prompt: string;
}

export interface MessageResponse {
  question: string | null;
  recommendation: Recommendation | null;
  round: number;
  state: string;
}

export interface TraceTurn {
  round: number;
  speaker: "patient" | "system";
  text: string;
}

export interface TraceHpi {
  narrative: string;
  sections: Record<string, string>;
}

export interface TraceView {
  session_id: string;
  state: string;
  round: number;
  created: string;
  updated: string;
  trace: {
    turns: TraceTurn[];
    hpis: TraceHpi[];
    recommendations: Array<{
      round: number;
      best: [string, string | null];
      candidates: Array<[string, string | null]>;
      rationale: string;
      ambiguous: boolean;
    }>;
  };
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class TriageApi {
  constructor(
    readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const url = this.baseUrl.replace(/\/$/, "") + path;
    const response = await this.fetchFn(url, {
      headers: { "Content-Type": "application/json" },
      ...init,
    });
    if (!response.ok) {
      let detail = `${response.status}`;
      try {
        const body = (await response.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        // body was not JSON; keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  createSession(rounds?: number): Promise<CreateSessionResponse> {
    return this.request<CreateSessionResponse>("/api/v1/sessions", {
      method: "POST",
      body: JSON.stringify(rounds === undefined ? {} : { rounds }),
    });
  }

  sendMessage(
    sessionId: string,
    text: string,
    idempotencyKey: string,
  ): Promise<MessageResponse> {
    return this.request<MessageResponse>(
      `/api/v1/sessions/${encodeURIComponent(sessionId)}/message`,
      {
        method: "POST",
        body: JSON.stringify({ text, idempotency_key: idempotencyKey }),
      },
    );
  }

  getTrace(sessionId: string): Promise<TraceView> {
    return this.request<TraceView>(`/api/v1/sessions/${encodeURIComponent(sessionId)}`);
  }
}

export function displayDepartment(ref: DepartmentRef): string {
  return ref.secondary ? `${ref.primary} / ${ref.secondary}` : ref.primary;
}
