/** Typed client for the facespeak HTTP service.
 *
 * Every call goes through `request`, which turns non-2xx responses into
 * ApiError so the UI can surface them inline instead of crashing.
 */

export interface PhraseBank {
  format_version: number;
  pace: Record<string, string[]>;
  tone: Record<string, string[]>;
  noise: Record<string, string[]>;
  distance: Record<string, string[]>;
  public: string[];
}

export interface Candidate {
  id: string;
  audio_url: string;
  seed: number;
}

export interface CandidatesResponse {
  session_id: string;
  seed: number;
  candidates: Candidate[];
}

export interface SelectResponse {
  ok: boolean;
  session_id: string;
  selected: string;
}

export interface SynthesizeResponse {
  audio_url: string;
  seed: number;
  prompted: boolean;
  metrics: { speaker_sim: number | null };
  warning?: string;
}

export interface CandidatesRequest {
  face_id?: string;
  face_b64?: string;
  description: string;
  n: number;
  seed: number;
}

export interface SynthesizeRequest {
  session_id: string;
  input_text: string;
  description?: string;
  seed: number;
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let resp: Response;
    try {
      resp = await this.fetchImpl(this.baseUrl + path, init);
    } catch (err) {
      throw new ApiError(0, `network error: ${String(err)}`);
    }
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const body = (await resp.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(resp.status, detail);
    }
    return (await resp.json()) as T;
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  phrases(): Promise<PhraseBank> {
    return this.request<PhraseBank>("/phrases");
  }

  candidates(req: CandidatesRequest): Promise<CandidatesResponse> {
    return this.post<CandidatesResponse>("/candidates", req);
  }

  select(sessionId: string, candidateId: string): Promise<SelectResponse> {
    return this.post<SelectResponse>("/select", {
      session_id: sessionId,
      candidate_id: candidateId,
    });
  }

  synthesize(req: SynthesizeRequest): Promise<SynthesizeResponse> {
    return this.post<SynthesizeResponse>("/synthesize", req);
  }

  audioUrl(path: string): string {
    return this.baseUrl + path;
  }
}
