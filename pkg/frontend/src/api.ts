// Typed client for the listening-test JSON API. All server interaction of
// the UI goes through this module; stimulus audio is only ever fetched via
// stimulusUrl().

export interface SessionInfo {
  session_id: string;
  stimuli: string[];
}

export interface RatingAck {
  status: string;
  count: number;
}

export type SubmitResult =
  | { kind: "ok"; ack: RatingAck }
  | { kind: "conflict" }
  | { kind: "invalid"; detail: string }
  | { kind: "error"; detail: string };

export interface ResultsTable {
  conditions: unknown[];
  total_ratings: number;
}

export class ApiClient {
  constructor(private readonly base: string = "") {}

  async newSession(): Promise<SessionInfo> {
    const resp = await fetch(`${this.base}/api/session`);
    if (!resp.ok) {
      throw new Error(`session request failed: ${resp.status}`);
    }
    return (await resp.json()) as SessionInfo;
  }

  stimulusUrl(stimulusId: string): string {
    return `${this.base}/api/stimulus/${encodeURIComponent(stimulusId)}`;
  }

  async submitRating(
    sessionId: string,
    stimulusId: string,
    sig: number,
    bak: number,
    ovrl: number,
  ): Promise<SubmitResult> {
    const resp = await fetch(`${this.base}/api/rating`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        session_id: sessionId,
        stimulus_id: stimulusId,
        sig,
        bak,
        ovrl,
      }),
    });
    if (resp.status === 200) {
      return { kind: "ok", ack: (await resp.json()) as RatingAck };
    }
    if (resp.status === 409) {
      return { kind: "conflict" };
    }
    const detail = await resp.text();
    if (resp.status === 422) {
      return { kind: "invalid", detail };
    }
    return { kind: "error", detail: `${resp.status}: ${detail}` };
  }

  async results(): Promise<ResultsTable> {
    const resp = await fetch(`${this.base}/api/results`);
    if (!resp.ok) {
      throw new Error(`results request failed: ${resp.status}`);
    }
    return (await resp.json()) as ResultsTable;
  }
}
