// Single-page state machine. Every transition is a pure function that
// returns a new state, or the *same object* when the transition is not
// legal from the current phase — callers can use identity to detect a
// rejected transition (this is what makes double submission impossible:
// beginSubmit from "submitting" is a no-op).

import type { ModelInfo, PredictResponse } from "./api";

export type Phase = "home" | "preview" | "submitting" | "result" | "error";

export interface UiState {
  phase: Phase;
  models: ModelInfo[];
  modelId: string | null;
  image: File | null;
  result: PredictResponse | null;
  /** Inline banner on home (failed submit) or the error view's message. */
  errorMessage: string | null;
}

export function initial(): UiState {
  return {
    phase: "home",
    models: [],
    modelId: null,
    image: null,
    result: null,
    errorMessage: null,
  };
}

export function modelsLoaded(s: UiState, models: ModelInfo[]): UiState {
  if (s.phase !== "home" && s.phase !== "error") return s;
  return {
    ...s,
    phase: "home",
    models,
    modelId: s.modelId ?? models[0]?.id ?? null,
    errorMessage: null,
  };
}

export function loadFailed(s: UiState, message: string): UiState {
  if (s.phase !== "home" && s.phase !== "error") return s;
  return { ...s, phase: "error", errorMessage: message };
}

export function pickModel(s: UiState, id: string): UiState {
  if (s.phase !== "home" && s.phase !== "preview") return s;
  if (!s.models.some((m) => m.id === id)) return s;
  return { ...s, modelId: id };
}

export function pickImage(s: UiState, image: File): UiState {
  if (s.phase !== "home" && s.phase !== "preview") return s;
  return { ...s, phase: "preview", image, errorMessage: null };
}

export function clearImage(s: UiState): UiState {
  if (s.phase !== "preview") return s;
  return { ...s, phase: "home", image: null };
}

/** The sole invariant behind the Upload button. */
export function canSubmit(s: UiState): boolean {
  return s.phase === "preview" && s.image !== null && s.modelId !== null;
}

export function beginSubmit(s: UiState): UiState {
  if (!canSubmit(s)) return s;
  return { ...s, phase: "submitting" };
}

export function submitSucceeded(s: UiState, result: PredictResponse): UiState {
  if (s.phase !== "submitting") return s;
  return { ...s, phase: "result", result };
}

/** Failed submits land back on home with an inline banner; the image is
 * cleared so a bad file cannot be resubmitted by accident. */
export function submitFailed(s: UiState, message: string): UiState {
  if (s.phase !== "submitting") return s;
  return { ...s, phase: "home", image: null, result: null, errorMessage: message };
}

/** "Return to home": keeps the loaded model list, drops everything else. */
export function reset(s: UiState): UiState {
  return { ...initial(), models: s.models, modelId: s.modelId };
}
