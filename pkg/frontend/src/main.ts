// Live-steering control surface: target chips, strength slider, suggestion
// banners, custom-class recorder, sensitivity profiles, live metrics strip.

import { debounce, SLIDER_DEBOUNCE_MS } from "./debounce.js";
import { ServiceConnection } from "./net.js";
import { EventMessage, MAX_TARGETS } from "./protocol.js";
import { Recorder } from "./recorder.js";
import {
  applyEvent,
  canAddTarget,
  dismissBanner,
  expireBanners,
  initialState,
  optimisticAlpha,
  optimisticToggle,
  setConnected,
  ViewState,
} from "./state.js";

let state: ViewState = initialState();

const wsUrl = `ws://${location.hostname}:${
  new URLSearchParams(location.search).get("ws") ?? "8766"
}`;

const conn = new ServiceConnection(wsUrl, {
  onEvent: (msg) => {
    state = applyEvent(state, msg as EventMessage, Date.now());
    render();
  },
  onOpen: () => {
    state = setConnected(state, true);
    render();
  },
  onClose: () => {
    state = setConnected(state, false);
    render();
  },
});

function toast(text: string): void {
  const el = document.getElementById("toast")!;
  el.textContent = text;
  el.classList.add("visible");
  setTimeout(() => el.classList.remove("visible"), 2500);
}

async function toggleTarget(classId: string): Promise<void> {
  const isActive = state.targets.includes(classId);
  if (!isActive && !canAddTarget(state, classId)) {
    toast(`at most ${MAX_TARGETS} simultaneous targets`);
    return;
  }
  const before = state.targets;
  state = optimisticToggle(state, classId);
  render();
  const reply = await conn.command("set_targets", { targets: state.targets });
  if (!reply.ok) {
    state = { ...state, targets: before };
    render();
    toast(reply.error ?? "target change rejected");
  }
}

const pushAlpha = debounce(async (alpha: number) => {
  const reply = await conn.command("set_strength", { alpha });
  if (!reply.ok) toast(reply.error ?? "strength change rejected");
}, SLIDER_DEBOUNCE_MS);

async function acceptSuggestion(id: string): Promise<void> {
  const reply = await conn.command("accept_suggestion", { suggestion_id: id });
  state = dismissBanner(state, id);
  render();
  if (!reply.ok) toast(reply.error ?? "could not accept suggestion");
}

async function rejectSuggestion(id: string): Promise<void> {
  state = dismissBanner(state, id);
  render();
  await conn.command("dismiss_suggestion", { suggestion_id: id });
}

// -- recorder ------------------------------------------------------------------

const recorder = new Recorder();

async function onRecordClick(): Promise<void> {
  const button = document.getElementById("record")! as HTMLButtonElement;
  const nameInput = document.getElementById("class-name")! as HTMLInputElement;
  if (!recorder.active) {
    try {
      await recorder.start();
      button.textContent = "Stop and save";
    } catch (err) {
      toast(`microphone unavailable: ${err}`);
    }
    return;
  }
  const result = await recorder.stop();
  button.textContent = "Record sample";
  const classId = nameInput.value.trim();
  if (!classId) {
    toast("name the class before recording");
    return;
  }
  if (result.seconds < 1.0) {
    toast("recording shorter than 1 s");
    return;
  }
  let reply = await conn.command("add_recording", {
    class_id: classId,
    samples: result.samples,
    sample_rate: result.sampleRate,
  });
  if (!reply.ok) {
    toast(reply.error ?? "recording rejected");
    return;
  }
  reply = await conn.command("finalize_class", { class_id: classId });
  toast(reply.ok ? `class "${classId}" is ready` : reply.error ?? "finalize failed");
}

async function onProfileAdd(): Promise<void> {
  const input = document.getElementById("profile-text")! as HTMLInputElement;
  const description = input.value.trim();
  if (!description) return;
  const id = `p${Date.now() % 100000}`;
  const reply = await conn.command("upsert_profile", {
    profile_id: id,
    description,
  });
  if (reply.ok) input.value = "";
  else toast(reply.error ?? "profile rejected");
}

// -- rendering -----------------------------------------------------------------

function render(): void {
  const root = document.getElementById("app")!;
  root.classList.toggle("disconnected", !state.connected);
  document.getElementById("conn")!.textContent = state.connected
    ? state.sessionActive ? "live" : "connected (no session)"
    : "reconnecting...";

  const chips = document.getElementById("chips")!;
  chips.replaceChildren(
    ...state.classes.map((cls) => {
      const chip = document.createElement("button");
      const active = state.targets.includes(cls.id);
      chip.className = `chip${active ? " active" : ""}${cls.provenance === "custom" ? " custom" : ""}`;
      chip.dataset.classId = cls.id;
      chip.textContent = cls.provenance === "custom" ? `${cls.id} *` : cls.id;
      const blocked = !active && !canAddTarget(state, cls.id);
      chip.disabled = blocked;
      chip.title = blocked ? `at most ${MAX_TARGETS} targets` : "";
      chip.onclick = () => void toggleTarget(cls.id);
      return chip;
    }),
  );

  const slider = document.getElementById("alpha")! as HTMLInputElement;
  if (document.activeElement !== slider) slider.value = String(state.alpha);
  document.getElementById("alpha-value")!.textContent = state.alpha.toFixed(2);

  const banners = document.getElementById("banners")!;
  banners.replaceChildren(
    ...state.banners.map((b) => {
      const div = document.createElement("div");
      div.className = "banner";
      div.dataset.suggestionId = b.suggestion_id;
      const label = b.kind === "known-class"
        ? `Detected: ${b.class_id}. Attenuate it?`
        : `Unfamiliar sound matches "${b.profile_id}" (${b.description}). Save it?`;
      const remaining = Math.max(0, (b.expiresAtMs - Date.now()) / 1000);
      div.innerHTML = `<span>${label}</span><span class="countdown">${remaining.toFixed(0)}s</span>`;
      const yes = document.createElement("button");
      yes.textContent = b.kind === "known-class" ? "Attenuate" : "Save";
      yes.onclick = () => void acceptSuggestion(b.suggestion_id);
      const no = document.createElement("button");
      no.textContent = "Dismiss";
      no.onclick = () => void rejectSuggestion(b.suggestion_id);
      div.append(yes, no);
      return div;
    }),
  );

  const detection = document.getElementById("detection")!;
  detection.textContent = state.lastDetection
    ? state.lastDetection.labels
        .slice(0, 3)
        .map((l) => `${l.label} ${(l.confidence * 100).toFixed(0)}%`)
        .join("  ")
    : "-";

  const metrics = document.getElementById("metrics")!;
  metrics.textContent = state.metrics
    ? `hop ${state.metrics.hop_ms_mean.toFixed(1)} ms (95p ${state.metrics.hop_ms_p95.toFixed(1)})` +
      ` | latency ${state.metrics.latency_ms.toFixed(1)} ms` +
      ` | buffer ${state.metrics.buffer_occupancy_samples} | rtf ${state.metrics.real_time_factor.toFixed(2)}`
    : "-";

  const profiles = document.getElementById("profiles")!;
  profiles.replaceChildren(
    ...state.profiles.map((p) => {
      const li = document.createElement("li");
      li.textContent = `${p.id}: ${p.description}`;
      const del = document.createElement("button");
      del.textContent = "x";
      del.onclick = () => void conn.command("delete_profile", { profile_id: p.id });
      li.append(del);
      return li;
    }),
  );
}

function tick(): void {
  const next = expireBanners(state, Date.now());
  if (next !== state) {
    state = next;
    render();
  } else if (state.banners.length) {
    render(); // refresh countdowns
  }
}

window.addEventListener("DOMContentLoaded", () => {
  document.getElementById("alpha")!.addEventListener("input", (ev) => {
    const alpha = parseFloat((ev.target as HTMLInputElement).value);
    state = optimisticAlpha(state, alpha);
    document.getElementById("alpha-value")!.textContent = state.alpha.toFixed(2);
    pushAlpha(alpha);
  });
  document.getElementById("record")!.addEventListener("click", () => void onRecordClick());
  document.getElementById("profile-add")!.addEventListener("click", () => void onProfileAdd());
  setInterval(tick, 500);
  conn.connect();
  render();
});
