// Thin typed wrappers over the gateway's two JSON endpoints.

export interface ModelInfo {
  id: string;
  precision: string;
  size_bytes: number;
  payload_bytes: number;
  classes: string[];
}

export interface PredictResponse {
  label: string;
  confidence: number;
  model: string;
  latency_ms: number;
  scores: Record<string, number>;
  image_echo: string;
}

/** Error responses arrive as {"error": {"code", "message"}}. */
export class ApiError extends Error {
  constructor(
    public code: string,
    message: string,
    public status: number,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function asApiError(res: Response): Promise<ApiError> {
  try {
    const doc = await res.json();
    if (doc && doc.error && typeof doc.error.message === "string") {
      return new ApiError(doc.error.code ?? "unknown", doc.error.message, res.status);
    }
  } catch {
    // non-JSON body; fall through to the generic error
  }
  return new ApiError(`http-${res.status}`, `request failed with status ${res.status}`, res.status);
}

export async function fetchModels(): Promise<ModelInfo[]> {
  const res = await fetch("/api/models");
  if (!res.ok) throw await asApiError(res);
  return (await res.json()) as ModelInfo[];
}

export async function predict(modelId: string, image: File): Promise<PredictResponse> {
  const body = new FormData();
  body.append("model", modelId);
  body.append("image", image, image.name);
  const res = await fetch("/api/predict", { method: "POST", body });
  if (!res.ok) throw await asApiError(res);
  return (await res.json()) as PredictResponse;
}

export function messageOf(err: unknown): string {
  if (err instanceof ApiError) return err.message;
  if (err instanceof Error) return `cannot reach the diagnosis service (${err.message})`;
  return "cannot reach the diagnosis service";
}
