/** Studio application: wires the session store and components into the page.
 *
 * Layout: face picker + candidate request form at the top, candidate board in
 * the middle, synthesis panel (text, description dropdowns, seed) below, and
 * the history of synthesized clips at the bottom.
 */
import { ApiClient, ApiError, PhraseBank } from "./api.js";
import {
  candidateBoard,
  DescriptionControls,
  errorBanner,
  historyList,
} from "./components.js";
import { MutationInFlightError, SessionStore } from "./session.js";

export class StudioApp {
  readonly store: SessionStore;
  controls: DescriptionControls | null = null;

  constructor(
    private readonly root: HTMLElement,
    private readonly api: ApiClient,
  ) {
    this.store = new SessionStore(api);
  }

  async start(): Promise<void> {
    let bank: PhraseBank;
    try {
      bank = await this.api.phrases();
    } catch (err) {
      this.showError(err, () => void this.start());
      return;
    }
    this.controls = new DescriptionControls(bank);
    this.render();
  }

  async requestCandidates(faceId: string, n: number, seed: number): Promise<void> {
    const description = this.controls ? this.controls.description() : "";
    try {
      await this.store.createSession(
        { face_id: faceId, description, n, seed },
        faceId,
      );
    } catch (err) {
      this.showError(err, () => void this.requestCandidates(faceId, n, seed));
      return;
    }
    this.render();
  }

  async select(candidateId: string): Promise<void> {
    try {
      await this.store.selectCandidate(candidateId);
    } catch (err) {
      this.showError(err);
      return;
    }
    this.render();
  }

  async synthesize(text: string, seed: number): Promise<void> {
    const description = this.controls?.description() || undefined;
    try {
      await this.store.synthesize(text, description, seed);
    } catch (err) {
      this.showError(err);
      return;
    }
    this.render();
  }

  private showError(err: unknown, retry?: () => void): void {
    const message =
      err instanceof ApiError
        ? `service error (${err.status}): ${err.message}`
        : err instanceof MutationInFlightError
          ? err.message
          : `unexpected error: ${String(err)}`;
    const existing = this.root.querySelector(".error-banner");
    if (existing) existing.remove();
    this.root.prepend(errorBanner(message, retry));
  }

  render(): void {
    this.root.textContent = "";
    const session = this.store.session;

    const form = document.createElement("form");
    form.className = "candidate-form";
    form.innerHTML = `
      <input name="face_id" placeholder="face id (e.g. faces/spk_000.png)" required />
      <input name="n" type="number" value="3" min="1" />
      <input name="seed" type="number" value="0" />
      <button type="submit">Generate candidates</button>
    `;
    form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      const data = new FormData(form);
      void this.requestCandidates(
        String(data.get("face_id")),
        Number(data.get("n")),
        Number(data.get("seed")),
      );
    });
    this.root.append(form);

    if (this.controls) this.root.append(this.controls.root);

    if (session) {
      const header = document.createElement("div");
      header.className = "session-header";
      header.textContent = `session ${session.sessionId} · face ${session.faceLabel} · seed ${session.seed}`;
      this.root.append(header);
      this.root.append(
        candidateBoard(session, (p) => this.api.audioUrl(p), {
          onSelect: (id) => void this.select(id),
        }),
      );

      const panel = document.createElement("form");
      panel.className = "synthesis-panel";
      panel.innerHTML = `
        <textarea name="text" placeholder="text to speak" required></textarea>
        <input name="seed" type="number" value="0" />
        <button type="submit">Synthesize</button>
      `;
      panel.addEventListener("submit", (ev) => {
        ev.preventDefault();
        const data = new FormData(panel);
        void this.synthesize(String(data.get("text")), Number(data.get("seed")));
      });
      this.root.append(panel);
      this.root.append(historyList(session.history, (p) => this.api.audioUrl(p)));
    }
  }
}

export function mount(root: HTMLElement, baseUrl = ""): StudioApp {
  const app = new StudioApp(root, new ApiClient(baseUrl));
  void app.start();
  return app;
}
