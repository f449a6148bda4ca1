/** Client-side session store.
 *
 * Mirrors server state: every fact held here came from a server response,
 * and mutations (select, synthesize) only update the store after the server
 * confirms. At most one mutation may be in flight per session.
 */
import {
  ApiClient,
  Candidate,
  CandidatesRequest,
  SynthesizeResponse,
} from "./api.js";

export interface ClipRecord {
  audioUrl: string;
  seed: number;
  text: string;
  prompted: boolean;
  speakerSim: number | null;
  warning?: string;
}

export interface StudioSession {
  sessionId: string;
  faceLabel: string;
  seed: number;
  candidates: Candidate[];
  selected: string | null;
  history: ClipRecord[];
}

export class MutationInFlightError extends Error {
  constructor() {
    super("another request is still in flight for this session");
    this.name = "MutationInFlightError";
  }
}

export class SessionStore {
  session: StudioSession | null = null;
  private busy = false;

  constructor(private readonly api: ApiClient) {}

  get mutationInFlight(): boolean {
    return this.busy;
  }

  private async mutate<T>(fn: () => Promise<T>): Promise<T> {
    if (this.busy) throw new MutationInFlightError();
    this.busy = true;
    try {
      return await fn();
    } finally {
      this.busy = false;
    }
  }

  async createSession(
    req: CandidatesRequest,
    faceLabel: string,
  ): Promise<StudioSession> {
    return this.mutate(async () => {
      const resp = await this.api.candidates(req);
      this.session = {
        sessionId: resp.session_id,
        faceLabel,
        seed: resp.seed,
        candidates: resp.candidates,
        selected: null,
        history: [],
      };
      return this.session;
    });
  }

  async selectCandidate(candidateId: string): Promise<void> {
    const session = this.require();
    await this.mutate(async () => {
      const resp = await this.api.select(session.sessionId, candidateId);
      session.selected = resp.selected;
    });
  }

  async synthesize(
    text: string,
    description: string | undefined,
    seed: number,
  ): Promise<ClipRecord> {
    const session = this.require();
    return this.mutate(async () => {
      const resp: SynthesizeResponse = await this.api.synthesize({
        session_id: session.sessionId,
        input_text: text,
        description,
        seed,
      });
      const clip: ClipRecord = {
        audioUrl: resp.audio_url,
        seed: resp.seed,
        text,
        prompted: resp.prompted,
        speakerSim: resp.metrics.speaker_sim,
        warning: resp.warning,
      };
      session.history.push(clip);
      return clip;
    });
  }

  private require(): StudioSession {
    if (!this.session) throw new Error("no active session");
    return this.session;
  }
}
