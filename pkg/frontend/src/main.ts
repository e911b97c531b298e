// DOM wiring: one audio player, three 5-point scales, a submit button.
// Condition labels are never shown; raters only see a neutral clip counter.

import { ApiClient } from "./api.js";
import {
  SCALES,
  Scale,
  UiSessionState,
  advance,
  canSubmit,
  completeTriple,
  currentStimulus,
  isComplete,
  progressLabel,
  selectScore,
  startSession,
} from "./state.js";

const SCALE_PROMPTS: Record<Scale, string> = {
  sig: "How natural is the speech signal?",
  bak: "How intrusive is the background?",
  ovrl: "Overall quality?",
};

const SCALE_ANCHORS: Record<Scale, [string, string]> = {
  sig: ["very unnatural", "very natural"],
  bak: ["very intrusive", "not intrusive"],
  ovrl: ["bad", "excellent"],
};

const api = new ApiClient();
let state: UiSessionState | null = null;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function setStatus(text: string, isError = false): void {
  const status = el<HTMLParagraphElement>("status");
  status.textContent = text;
  status.className = isError ? "error" : "";
}

function renderScales(): void {
  const host = el<HTMLDivElement>("scales");
  host.innerHTML = "";
  for (const scale of SCALES) {
    const block = document.createElement("fieldset");
    const legend = document.createElement("legend");
    legend.textContent = SCALE_PROMPTS[scale];
    block.appendChild(legend);
    const row = document.createElement("div");
    row.className = "likert";
    const [low, high] = SCALE_ANCHORS[scale];
    const lowLabel = document.createElement("span");
    lowLabel.textContent = low;
    row.appendChild(lowLabel);
    for (let v = 1; v <= 5; v++) {
      const label = document.createElement("label");
      const radio = document.createElement("input");
      radio.type = "radio";
      radio.name = scale;
      radio.value = String(v);
      radio.addEventListener("change", () => {
        if (state) {
          state = selectScore(state, scale, v);
          syncControls();
        }
      });
      label.appendChild(radio);
      label.appendChild(document.createTextNode(String(v)));
      row.appendChild(label);
    }
    const highLabel = document.createElement("span");
    highLabel.textContent = high;
    row.appendChild(highLabel);
    block.appendChild(row);
    host.appendChild(block);
  }
}

function syncControls(): void {
  const submit = el<HTMLButtonElement>("submit");
  submit.disabled = state === null || !canSubmit(state);
}

function loadCurrentStimulus(): void {
  if (!state) return;
  const stimulusId = currentStimulus(state);
  if (stimulusId === null) {
    showCompletion();
    return;
  }
  el<HTMLParagraphElement>("progress").textContent = progressLabel(state);
  const audio = el<HTMLAudioElement>("player");
  audio.src = api.stimulusUrl(stimulusId);
  for (const input of document.querySelectorAll<HTMLInputElement>("input[type=radio]")) {
    input.checked = false;
  }
  syncControls();
  setStatus("Listen (replay as often as you like), then rate all three scales.");
}

function showCompletion(): void {
  if (!state) return;
  el<HTMLDivElement>("rating-panel").hidden = true;
  const done = el<HTMLDivElement>("completion");
  done.hidden = false;
  el<HTMLSpanElement>("session-id").textContent = state.sessionId;
}

async function submitCurrent(): Promise<void> {
  if (!state || !canSubmit(state)) return;
  const stimulusId = currentStimulus(state);
  if (stimulusId === null) return;
  const [sig, bak, ovrl] = completeTriple(state);
  const submit = el<HTMLButtonElement>("submit");
  submit.disabled = true;
  const result = await api.submitRating(state.sessionId, stimulusId, sig, bak, ovrl);
  if (result.kind === "ok") {
    state = advance(state);
    loadCurrentStimulus();
  } else if (result.kind === "conflict") {
    setStatus("This clip was already rated; skipping forward.", true);
    state = advance(state);
    loadCurrentStimulus();
  } else {
    setStatus(`Submission rejected: ${result.kind === "invalid" ? result.detail : result.detail}`, true);
    syncControls();
  }
}

async function boot(): Promise<void> {
  renderScales();
  el<HTMLButtonElement>("submit").addEventListener("click", () => void submitCurrent());
  el<HTMLButtonElement>("retry").addEventListener("click", () => void boot());
  el<HTMLDivElement>("connect-error").hidden = true;
  try {
    state = startSession(await api.newSession());
  } catch (err) {
    el<HTMLDivElement>("connect-error").hidden = false;
    setStatus(`Could not reach the rating service: ${String(err)}`, true);
    return;
  }
  el<HTMLDivElement>("rating-panel").hidden = false;
  loadCurrentStimulus();
}

window.addEventListener("DOMContentLoaded", () => void boot());
