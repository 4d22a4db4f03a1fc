// DOM wiring: one render function per phase over the pure state machine.
// The full view is re-rendered on every transition — the tree is tiny and
// this keeps rendering an honest function of state.

import { fetchModels, messageOf, predict } from "./api";
import type { ModelInfo, PredictResponse } from "./api";
import { formatBytes, formatLatency, formatPercent } from "./format";
import {
  beginSubmit,
  canSubmit,
  clearImage,
  initial,
  loadFailed,
  modelsLoaded,
  pickImage,
  pickModel,
  reset,
  submitFailed,
  submitSucceeded,
} from "./state";
import type { UiState } from "./state";

export interface Api {
  fetchModels(): Promise<ModelInfo[]>;
  predict(modelId: string, image: File): Promise<PredictResponse>;
}

export interface AppHandle {
  getState(): UiState;
  /** Resolves when the initial /api/models load has settled. */
  ready: Promise<void>;
}

type Child = Node | string;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string | boolean> = {},
  ...children: Child[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (typeof value === "boolean") {
      if (value) node.setAttribute(key, "");
    } else {
      node.setAttribute(key, value);
    }
  }
  node.append(...children);
  return node;
}

export function mountApp(root: HTMLElement, api: Api = { fetchModels, predict }): AppHandle {
  let state = initial();

  // object-URL lifecycle for the preview <img>; jsdom has no
  // createObjectURL, so fall back to an empty src there.
  let urlOwner: File | null = null;
  let objectUrl = "";
  function previewSrc(image: File | null): string {
    if (image !== urlOwner) {
      if (objectUrl && typeof URL.revokeObjectURL === "function") {
        URL.revokeObjectURL(objectUrl);
      }
      objectUrl =
        image && typeof URL.createObjectURL === "function" ? URL.createObjectURL(image) : "";
      urlOwner = image;
    }
    return objectUrl;
  }

  function update(next: UiState) {
    if (next === state) return;
    state = next;
    render();
  }

  async function loadModels(): Promise<void> {
    try {
      update(modelsLoaded(state, await api.fetchModels()));
    } catch (err) {
      update(loadFailed(state, messageOf(err)));
    }
  }

  async function submit(): Promise<void> {
    const armed = beginSubmit(state);
    if (armed === state) return; // not in preview, or already submitting
    const { modelId, image } = armed;
    update(armed);
    try {
      update(submitSucceeded(state, await api.predict(modelId!, image!)));
    } catch (err) {
      update(submitFailed(state, messageOf(err)));
    }
  }

  function fileInput(id: string, camera: boolean): HTMLInputElement {
    const input = el("input", {
      id,
      type: "file",
      accept: "image/*",
      hidden: true,
      ...(camera ? { capture: "environment" } : {}),
    });
    input.addEventListener("change", () => {
      const file = input.files?.[0];
      if (file) update(pickImage(state, file));
      input.value = ""; // re-selecting the same file should re-fire
    });
    return input;
  }

  function modelSelector(disabled: boolean): HTMLElement {
    const select = el("select", { id: "model-select", ...(disabled ? { disabled: true } : {}) });
    for (const m of state.models) {
      const option = el(
        "option",
        { value: m.id },
        `${m.id} (${m.precision}, ${formatBytes(m.size_bytes)})`,
      );
      if (m.id === state.modelId) option.selected = true;
      select.append(option);
    }
    select.addEventListener("change", () => update(pickModel(state, select.value)));
    return el("label", { class: "field" }, "Model", select);
  }

  function captureView(): HTMLElement[] {
    const busy = state.phase === "submitting";
    const parts: HTMLElement[] = [];

    if (state.errorMessage) {
      parts.push(el("p", { class: "banner", role: "alert" }, state.errorMessage));
    }
    parts.push(modelSelector(busy));

    const library = fileInput("file-input", false);
    const camera = fileInput("camera-input", true);
    const pickButton = el("button", { id: "pick-file", type: "button" }, "Choose image");
    pickButton.addEventListener("click", () => library.click());
    const cameraButton = el("button", { id: "pick-camera", type: "button" }, "Use camera");
    cameraButton.addEventListener("click", () => camera.click());
    if (busy) {
      pickButton.disabled = true;
      cameraButton.disabled = true;
    }
    parts.push(el("div", { class: "row" }, pickButton, cameraButton, library, camera));

    if (state.image) {
      const figure = el(
        "figure",
        { class: "preview" },
        el("img", {
          id: "preview",
          src: previewSrc(state.image),
          alt: `preview of ${state.image.name}`,
        }),
        el("figcaption", {}, state.image.name),
      );
      parts.push(figure);
      if (!busy) {
        const clear = el("button", { id: "clear", type: "button" }, "Clear");
        clear.addEventListener("click", () => update(clearImage(state)));
        parts.push(clear);
      }
    }

    const upload = el("button", { id: "upload", type: "button" }, "Upload");
    upload.disabled = !canSubmit(state);
    upload.addEventListener("click", () => void submit());
    parts.push(upload);

    if (busy) {
      parts.push(el("p", { id: "status", role: "status" }, "Analyzing image…"));
    }
    return parts;
  }

  function resultView(): HTMLElement[] {
    const r = state.result!;
    const rows = el(
      "dl",
      { class: "readout" },
      el("dt", {}, "Diagnosis"),
      el("dd", { id: "result-label" }, r.label),
      el("dt", {}, "Confidence"),
      el("dd", { id: "result-confidence" }, formatPercent(r.confidence)),
      el("dt", {}, "Model"),
      el("dd", { id: "result-model" }, r.model),
      el("dt", {}, "Latency"),
      el("dd", { id: "result-latency" }, formatLatency(r.latency_ms)),
    );
    const scores = el("ul", { id: "result-scores" });
    for (const [cls, p] of Object.entries(r.scores)) {
      scores.append(el("li", {}, `${cls}: ${formatPercent(p)}`));
    }
    const back = el("button", { id: "home", type: "button" }, "Analyze another image");
    back.addEventListener("click", () => update(reset(state)));

    const parts: HTMLElement[] = [];
    if (state.image) {
      parts.push(
        el(
          "figure",
          { class: "preview" },
          el("img", {
            id: "result-image",
            src: previewSrc(state.image),
            alt: `submitted image ${state.image.name}`,
          }),
          el("figcaption", {}, state.image.name),
        ),
      );
    }
    parts.push(rows, scores, back);
    return parts;
  }

  function errorView(): HTMLElement[] {
    const retry = el("button", { id: "retry", type: "button" }, "Retry");
    retry.addEventListener("click", () => void loadModels());
    return [
      el("p", { class: "banner", role: "alert" }, state.errorMessage ?? "something went wrong"),
      retry,
    ];
  }

  function render() {
    root.replaceChildren();
    const main = el("main", { class: "shell" });
    main.append(
      el("h1", {}, "Skin lesion diagnosis"),
      el("p", { class: "tagline" }, "Pick a model variant, add a photo, and upload."),
    );
    switch (state.phase) {
      case "home":
      case "preview":
      case "submitting":
        main.append(...captureView());
        break;
      case "result":
        main.append(...resultView());
        break;
      case "error":
        main.append(...errorView());
        break;
    }
    root.append(main);
  }

  render();
  const ready = loadModels();
  return { getState: () => state, ready };
}
