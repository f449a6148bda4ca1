/** DOM builders for the studio: candidate board, description controls, and
 * the synthesis panel. Pure functions of state plus handler callbacks, so
 * tests can render them against a stubbed API without a bundler.
 */
import { PhraseBank } from "./api.js";
import { ClipRecord, StudioSession } from "./session.js";

const CONTROL_FEATURES = ["pace", "tone", "noise", "distance"] as const;
export type ControlFeature = (typeof CONTROL_FEATURES)[number];

const NONE = "(unspecified)";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function errorBanner(message: string, onRetry?: () => void): HTMLElement {
  const banner = el("div", "error-banner");
  banner.setAttribute("role", "alert");
  banner.append(el("span", "error-text", message));
  if (onRetry) {
    const btn = el("button", "retry", "Retry");
    btn.addEventListener("click", onRetry);
    banner.append(btn);
  }
  return banner;
}

/** Dropdowns whose options are the server's labeler bins, one per feature.
 * The composed description joins the first phrase of each chosen bin. */
export class DescriptionControls {
  readonly root: HTMLElement;
  private readonly selects = new Map<ControlFeature, HTMLSelectElement>();

  constructor(private readonly bank: PhraseBank) {
    this.root = el("div", "description-controls");
    for (const feature of CONTROL_FEATURES) {
      const label = el("label", "control", feature);
      const select = el("select");
      select.dataset.feature = feature;
      const blank = el("option", undefined, NONE);
      blank.value = "";
      select.append(blank);
      for (const bin of Object.keys(bank[feature])) {
        const opt = el("option", undefined, bin);
        opt.value = bin;
        select.append(opt);
      }
      label.append(select);
      this.selects.set(feature, select);
      this.root.append(label);
    }
  }

  setBin(feature: ControlFeature, bin: string): void {
    const select = this.selects.get(feature);
    if (!select) throw new Error(`no control for ${feature}`);
    select.value = bin;
  }

  /** One sentence per chosen bin, using the bin's first phrase. */
  description(): string {
    const parts: string[] = [];
    for (const feature of CONTROL_FEATURES) {
      const bin = this.selects.get(feature)!.value;
      if (!bin) continue;
      const phrases = this.bank[feature][bin];
      if (!phrases || phrases.length === 0) continue;
      parts.push(phrases[0]!);
    }
    return parts.join(" ");
  }
}

export interface BoardHandlers {
  onSelect: (candidateId: string) => void;
}

export function candidateBoard(
  session: StudioSession,
  audioUrl: (path: string) => string,
  handlers: BoardHandlers,
): HTMLElement {
  const board = el("div", "candidate-board");
  for (const cand of session.candidates) {
    const card = el("div", "candidate-card");
    card.dataset.candidateId = cand.id;
    if (session.selected === cand.id) card.classList.add("selected");
    card.append(el("div", "candidate-title", `Voice ${cand.id}`));
    const audio = el("audio");
    audio.controls = true;
    audio.src = audioUrl(cand.audio_url);
    card.append(audio);
    card.append(el("div", "seed", `seed ${cand.seed}`));
    const btn = el("button", "select", session.selected === cand.id ? "Selected" : "Select");
    btn.disabled = session.selected === cand.id;
    btn.addEventListener("click", () => handlers.onSelect(cand.id));
    card.append(btn);
    board.append(card);
  }
  return board;
}

export function clipCard(clip: ClipRecord, audioUrl: (p: string) => string): HTMLElement {
  const card = el("div", "clip-card");
  card.append(el("div", "clip-text", clip.text));
  const audio = el("audio");
  audio.controls = true;
  audio.src = audioUrl(clip.audioUrl);
  card.append(audio);
  const prompted = el(
    "span",
    clip.prompted ? "prompted-flag prompted" : "prompted-flag unprompted",
    clip.prompted ? "prompted" : "unprompted",
  );
  card.append(prompted);
  const sim =
    clip.speakerSim === null ? "n/a" : clip.speakerSim.toFixed(3);
  card.append(el("span", "speaker-sim", `speaker_sim ${sim}`));
  card.append(el("span", "seed", `seed ${clip.seed}`));
  if (clip.warning) card.append(el("div", "warning", clip.warning));
  return card;
}

export function historyList(
  history: ClipRecord[],
  audioUrl: (p: string) => string,
): HTMLElement {
  const list = el("div", "history");
  for (const clip of history) list.append(clipCard(clip, audioUrl));
  return list;
}
