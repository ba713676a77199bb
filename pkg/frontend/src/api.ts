/** Thin typed client for the render service. */

import { RenderBody } from "./state.js";
import { RenderResponse, ServiceInfo } from "./types.js";

export class ApiError extends Error {
  constructor(
    message: string,
    readonly status: number,
    readonly diagnosticId?: string,
  ) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const resp = await this.fetchFn(this.baseUrl + path);
    if (!resp.ok) throw new ApiError(`GET ${path} failed`, resp.status);
    return (await resp.json()) as T;
  }

  private async postJson<T>(path: string, body: unknown): Promise<T> {
    const resp = await this.fetchFn(this.baseUrl + path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!resp.ok) {
      let diagnostic: string | undefined;
      let detail = "";
      try {
        const payload = await resp.json();
        diagnostic = payload.diagnostic_id;
        detail = payload.error ?? "";
      } catch {
        // non-JSON error body; status alone will do
      }
      throw new ApiError(`POST ${path} failed (${resp.status}) ${detail}`, resp.status, diagnostic);
    }
    return (await resp.json()) as T;
  }

  info(): Promise<ServiceInfo> {
    return this.getJson<ServiceInfo>("/api/info");
  }

  async sources(): Promise<string[]> {
    const payload = await this.getJson<{ sources: string[] }>("/api/sources");
    return payload.sources;
  }

  render(body: RenderBody): Promise<RenderResponse> {
    return this.postJson<RenderResponse>("/api/render", body);
  }

  interpolate(body: RenderBody & { alpha?: number }): Promise<RenderResponse> {
    return this.postJson<RenderResponse>("/api/interpolate", body);
  }
}
