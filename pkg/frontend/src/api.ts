// Thin typed client for the generation service.

export interface GenerateResult {
  image: string; // base64 PNG
  drop: Record<string, string>;
  seed: number;
  timings: Record<string, number>;
}

export interface HealthResult {
  status: string;
  checkpoint_id: string;
}

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export class Client {
  constructor(private baseUrl: string = "") {}

  private async post<T>(path: string, body: unknown): Promise<T> {
    let response: Response;
    try {
      response = await fetch(this.baseUrl + path, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(body),
      });
    } catch (e) {
      throw new ApiError(0, `server unreachable (${e})`);
    }
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const data = await response.json();
        if (data.detail) detail = String(data.detail);
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return response.json() as Promise<T>;
  }

  generate(request: Record<string, unknown>): Promise<GenerateResult> {
    return this.post<GenerateResult>("/v1/generate", request);
  }

  fitLayout(labelsPngBase64: string): Promise<Record<string, unknown>> {
    return this.post<Record<string, unknown>>("/v1/fit-layout", {
      labels: labelsPngBase64,
    });
  }

  evaluate(generated: string[], layouts: Record<string, unknown>[]):
      Promise<Record<string, number>> {
    return this.post<Record<string, number>>("/v1/evaluate", {
      generated, layouts,
    });
  }

  async health(): Promise<HealthResult> {
    let response: Response;
    try {
      response = await fetch(this.baseUrl + "/v1/health");
    } catch (e) {
      throw new ApiError(0, `server unreachable (${e})`);
    }
    if (!response.ok) throw new ApiError(response.status, response.statusText);
    return response.json() as Promise<HealthResult>;
  }
}
