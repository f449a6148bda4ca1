// @vitest-environment happy-dom
import { beforeEach, describe, expect, it } from "vitest";

import { ApiClient, ApiError } from "../src/api.js";
import { StudioApp } from "../src/app.js";
import { DescriptionControls } from "../src/components.js";
import { MutationInFlightError, SessionStore } from "../src/session.js";
import { STUB_PHRASES, StubService } from "./stub.js";

let stub: StubService;
let api: ApiClient;
let root: HTMLElement;

beforeEach(() => {
  stub = new StubService();
  api = new ApiClient("", stub.fetch);
  document.body.innerHTML = '<div id="app"></div>';
  root = document.getElementById("app")!;
});

async function startedApp(): Promise<StudioApp> {
  const app = new StudioApp(root, api);
  await app.start();
  return app;
}

describe("candidate board", () => {
  it("renders n playable cards with seeds shown", async () => {
    const app = await startedApp();
    await app.requestCandidates("faces/spk_000.png", 3, 7);
    const cards = root.querySelectorAll(".candidate-card");
    expect(cards.length).toBe(3);
    for (const card of cards) {
      expect(card.querySelector("audio")?.getAttribute("src")).toMatch(/\/audio\//);
      expect(card.querySelector(".seed")?.textContent).toMatch(/^seed \d+/);
    }
  });

  it("selection round-trips through the server and highlights the card", async () => {
    const app = await startedApp();
    await app.requestCandidates("faces/spk_000.png", 3, 7);
    await app.select("c1");
    const selected = root.querySelector(".candidate-card.selected");
    expect(selected?.getAttribute("data-candidate-id")).toBe("c1");
    // the UI fact is fetchable from the server, not fabricated
    const serverSession = stub.sessions.get(app.store.session!.sessionId)!;
    expect(serverSession.selected).toBe("c1");
  });

  it("service failure shows an error banner and does not crash", async () => {
    const app = await startedApp();
    stub.failNext = { status: 500, detail: "boom" };
    await app.requestCandidates("faces/spk_000.png", 3, 7);
    const banner = root.querySelector(".error-banner");
    expect(banner?.textContent).toContain("500");
    expect(banner?.textContent).toContain("boom");
    expect(root.querySelectorAll(".candidate-card").length).toBe(0);
  });
});

describe("synthesis panel", () => {
  it("shows prompted flag and speaker similarity after selection", async () => {
    const app = await startedApp();
    await app.requestCandidates("faces/spk_000.png", 2, 1);
    await app.select("c0");
    await app.synthesize("good morning", 42);
    const clip = root.querySelector(".clip-card")!;
    expect(clip.querySelector(".prompted-flag")?.textContent).toBe("prompted");
    expect(clip.querySelector(".speaker-sim")?.textContent).toBe("speaker_sim 0.870");
    expect(clip.querySelector(".seed")?.textContent).toBe("seed 42");
  });

  it("surfaces the server's unprompted warning when nothing is selected", async () => {
    const app = await startedApp();
    await app.requestCandidates("faces/spk_000.png", 2, 1);
    await app.synthesize("good morning", 3);
    const clip = root.querySelector(".clip-card")!;
    expect(clip.querySelector(".prompted-flag")?.textContent).toBe("unprompted");
    expect(clip.querySelector(".warning")?.textContent).toContain("without a voice prompt");
  });

  it("appends each result to the history", async () => {
    const app = await startedApp();
    await app.requestCandidates("faces/spk_000.png", 1, 1);
    await app.select("c0");
    await app.synthesize("first", 1);
    await app.synthesize("second", 2);
    const clips = root.querySelectorAll(".clip-card");
    expect(clips.length).toBe(2);
    expect(clips[0]?.querySelector(".clip-text")?.textContent).toBe("first");
    expect(clips[1]?.querySelector(".clip-text")?.textContent).toBe("second");
  });
});

describe("description controls", () => {
  it("dropdown bins match the server phrase bank", async () => {
    const app = await startedApp();
    for (const feature of ["pace", "tone", "noise", "distance"] as const) {
      const select = root.querySelector<HTMLSelectElement>(
        `select[data-feature="${feature}"]`,
      )!;
      const options = [...select.options].map((o) => o.value).filter(Boolean);
      expect(options).toEqual(Object.keys(STUB_PHRASES[feature]));
    }
    expect(app.controls).not.toBeNull();
  });

  it("choosing the fast bin puts the fast-bin phrase into the request", async () => {
    const app = await startedApp();
    app.controls!.setBin("pace", "fast");
    await app.requestCandidates("faces/spk_000.png", 1, 0);
    const req = stub.requests.find((r) => r.path === "/candidates")!;
    expect((req.body as { description: string }).description).toContain(
      STUB_PHRASES.pace.fast[0],
    );
  });

  it("composes one sentence per chosen bin", () => {
    const controls = new DescriptionControls(STUB_PHRASES);
    document.body.append(controls.root);
    controls.setBin("pace", "slow");
    controls.setBin("tone", "expressive");
    expect(controls.description()).toBe(
      `${STUB_PHRASES.pace.slow[0]} ${STUB_PHRASES.tone.expressive[0]}`,
    );
  });
});

describe("session store", () => {
  it("rejects a second mutation while one is in flight", async () => {
    const store = new SessionStore(api);
    const first = store.createSession(
      { face_id: "f", description: "", n: 1, seed: 0 },
      "f",
    );
    await expect(
      store.createSession({ face_id: "f", description: "", n: 1, seed: 0 }, "f"),
    ).rejects.toBeInstanceOf(MutationInFlightError);
    await first;
    expect(store.mutationInFlight).toBe(false);
  });

  it("keeps server and client state identical after every mutation", async () => {
    const store = new SessionStore(api);
    const session = await store.createSession(
      { face_id: "faces/a.png", description: "d", n: 2, seed: 5 },
      "faces/a.png",
    );
    const server = stub.sessions.get(session.sessionId)!;
    expect(session.candidates).toEqual(server.candidates);
    expect(session.selected).toBe(server.selected);
    await store.selectCandidate("c1");
    expect(store.session!.selected).toBe(stub.sessions.get(session.sessionId)!.selected);
  });

  it("propagates API errors with status codes", async () => {
    const store = new SessionStore(api);
    await store.createSession({ face_id: "f", description: "", n: 1, seed: 0 }, "f");
    stub.failNext = { status: 404, detail: "unknown candidate" };
    await expect(store.selectCandidate("c9")).rejects.toMatchObject({
      name: "ApiError",
      status: 404,
    });
  });

  it("ApiError carries network failures as status 0", async () => {
    const failing = new ApiClient("", async () => {
      throw new Error("connection refused");
    });
    const store = new SessionStore(failing);
    await expect(
      store.createSession({ face_id: "f", description: "", n: 1, seed: 0 }, "f"),
    ).rejects.toMatchObject({ status: 0 });
    expect(ApiError.name).toBe("ApiError");
  });
});
