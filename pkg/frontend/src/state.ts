// Pure session-state machine for the rating flow. Raters move strictly
// forward through the playlist; a stimulus can be submitted only once all
// three scales are chosen, and never revised afterwards.

import type { SessionInfo } from "./api.js";

export type Scale = "sig" | "bak" | "ovrl";

export interface PendingTriple {
  sig: number | null;
  bak: number | null;
  ovrl: number | null;
}

export interface UiSessionState {
  sessionId: string;
  playlist: string[];
  cursor: number;
  pending: PendingTriple;
}

export const SCALES: Scale[] = ["sig", "bak", "ovrl"];

export function emptyTriple(): PendingTriple {
  return { sig: null, bak: null, ovrl: null };
}

export function startSession(info: SessionInfo): UiSessionState {
  if (info.stimuli.length === 0) {
    throw new Error("server returned an empty playlist");
  }
  return {
    sessionId: info.session_id,
    playlist: [...info.stimuli],
    cursor: 0,
    pending: emptyTriple(),
  };
}

export function isComplete(state: UiSessionState): boolean {
  return state.cursor >= state.playlist.length;
}

export function currentStimulus(state: UiSessionState): string | null {
  return isComplete(state) ? null : state.playlist[state.cursor];
}

export function isValidScore(value: number): boolean {
  return Number.isInteger(value) && value >= 1 && value <= 5;
}

export function selectScore(state: UiSessionState, scale: Scale, value: number): UiSessionState {
  if (isComplete(state)) {
    throw new Error("session already complete");
  }
  if (!isValidScore(value)) {
    throw new Error(`score must be an integer in 1..5, got ${value}`);
  }
  return { ...state, pending: { ...state.pending, [scale]: value } };
}

export function canSubmit(state: UiSessionState): boolean {
  if (isComplete(state)) {
    return false;
  }
  return SCALES.every((scale) => state.pending[scale] !== null);
}

export function completeTriple(state: UiSessionState): [number, number, number] {
  if (!canSubmit(state)) {
    throw new Error("triple is incomplete");
  }
  return [state.pending.sig as number, state.pending.bak as number, state.pending.ovrl as number];
}

export function advance(state: UiSessionState): UiSessionState {
  if (isComplete(state)) {
    return state;
  }
  return { ...state, cursor: state.cursor + 1, pending: emptyTriple() };
}

export function progressLabel(state: UiSessionState): string {
  const done = Math.min(state.cursor, state.playlist.length);
  return `clip ${Math.min(done + 1, state.playlist.length)} of ${state.playlist.length}`;
}
