import { afterEach, describe, expect, it, vi } from "vitest";

import { ApiClient } from "./api.js";
import { advance, canSubmit, completeTriple, currentStimulus, selectScore, startSession } from "./state.js";

// In-memory stand-in for the rating service: same status-code contract.
function makeFakeServer(nStimuli = 15) {
  const stimuli = Array.from({ length: nStimuli }, (_, i) => `stim${i}`);
  const ratings = new Set<string>();
  const fetchMock = vi.fn(async (url: unknown, init?: RequestInit) => {
    const path = String(url);
    if (path.endsWith("/api/session")) {
      return new Response(JSON.stringify({ session_id: "s000042", stimuli }), { status: 200 });
    }
    if (path.includes("/api/rating")) {
      const body = JSON.parse(String(init?.body));
      for (const scale of ["sig", "bak", "ovrl"]) {
        const v = body[scale];
        if (!Number.isInteger(v) || v < 1 || v > 5) {
          return new Response("validation error", { status: 422 });
        }
      }
      if (!stimuli.includes(body.stimulus_id)) {
        return new Response("not found", { status: 404 });
      }
      const key = `${body.session_id}:${body.stimulus_id}`;
      if (ratings.has(key)) {
        return new Response("conflict", { status: 409 });
      }
      ratings.add(key);
      return new Response(JSON.stringify({ status: "ok", count: ratings.size }), { status: 200 });
    }
    if (path.endsWith("/api/results")) {
      return new Response(JSON.stringify({ conditions: [], total_ratings: ratings.size }), {
        status: 200,
      });
    }
    return new Response("not found", { status: 404 });
  });
  return { fetchMock, ratings };
}

afterEach(() => {
  vi.unstubAllGlobals();
});

describe("ApiClient", () => {
  it("fetches a session and exposes stimulus URLs", async () => {
    const { fetchMock } = makeFakeServer();
    vi.stubGlobal("fetch", fetchMock);
    const api = new ApiClient();
    const session = await api.newSession();
    expect(session.stimuli).toHaveLength(15);
    expect(api.stimulusUrl(session.stimuli[0])).toBe("/api/stimulus/stim0");
  });

  it("maps status codes onto typed results", async () => {
    const { fetchMock } = makeFakeServer();
    vi.stubGlobal("fetch", fetchMock);
    const api = new ApiClient();
    const ok = await api.submitRating("s1", "stim0", 4, 3, 4);
    expect(ok.kind).toBe("ok");
    const dup = await api.submitRating("s1", "stim0", 4, 3, 4);
    expect(dup.kind).toBe("conflict");
    const bad = await api.submitRating("s1", "stim1", 9, 3, 4);
    expect(bad.kind).toBe("invalid");
    const missing = await api.submitRating("s1", "nope", 4, 3, 4);
    expect(missing.kind).toBe("error");
  });
});

describe("full rating session", () => {
  it("submits exactly 15 complete triples and the results reflect them", async () => {
    const { fetchMock } = makeFakeServer(15);
    vi.stubGlobal("fetch", fetchMock);
    const api = new ApiClient();
    let state = startSession(await api.newSession());
    let acks = 0;
    while (currentStimulus(state) !== null) {
      expect(canSubmit(state)).toBe(false); // incomplete triples cannot submit
      state = selectScore(state, "sig", 4);
      state = selectScore(state, "bak", 3);
      state = selectScore(state, "ovrl", 5);
      expect(canSubmit(state)).toBe(true);
      const [sig, bak, ovrl] = completeTriple(state);
      const result = await api.submitRating(state.sessionId, currentStimulus(state)!, sig, bak, ovrl);
      expect(result.kind).toBe("ok");
      acks += 1;
      state = advance(state);
    }
    expect(acks).toBe(15);
    const table = await api.results();
    expect(table.total_ratings).toBe(15);
  });

  it("skips forward on a duplicate-rating conflict", async () => {
    const { fetchMock, ratings } = makeFakeServer(3);
    vi.stubGlobal("fetch", fetchMock);
    const api = new ApiClient();
    let state = startSession(await api.newSession());
    ratings.add(`${state.sessionId}:stim0`); // someone already rated clip 0
    state = selectScore(selectScore(selectScore(state, "sig", 3), "bak", 3), "ovrl", 3);
    const result = await api.submitRating(state.sessionId, currentStimulus(state)!, 3, 3, 3);
    expect(result.kind).toBe("conflict");
    state = advance(state); // the UI moves on with a warning
    expect(currentStimulus(state)).toBe("stim1");
  });
});
