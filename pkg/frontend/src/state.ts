// ViewState: a pure fold of the server event stream plus in-flight
// optimistic edits. Reconnecting rebuilds the whole thing from the next
// state event, and the same event sequence always produces the same view.

import {
  ClassInfo,
  DetectionData,
  EventMessage,
  MAX_TARGETS,
  MetricsData,
  ProfileInfo,
  SuggestionData,
} from "./protocol.js";

export interface Banner extends SuggestionData {
  /** countdown anchor in *client* time so expiry renders without the server */
  expiresAtMs: number;
}

export interface ViewState {
  connected: boolean;
  sessionActive: boolean;
  targets: string[];
  alpha: number;
  classes: ClassInfo[];
  profiles: ProfileInfo[];
  drafts: string[];
  banners: Banner[];
  lastDetection: DetectionData | null;
  metrics: MetricsData | null;
  lastSeq: number;
  /** set when a sequence gap was observed; the client should resync */
  needsResync: boolean;
}

export function initialState(): ViewState {
  return {
    connected: false,
    sessionActive: false,
    targets: [],
    alpha: 1.0,
    classes: [],
    profiles: [],
    drafts: [],
    banners: [],
    lastDetection: null,
    metrics: null,
    lastSeq: 0,
    needsResync: false,
  };
}

export function canAddTarget(state: ViewState, classId: string): boolean {
  if (state.targets.includes(classId)) return false;
  return state.targets.length < MAX_TARGETS;
}

/** Fold one server event into the view. Pure: returns a new state. */
export function applyEvent(state: ViewState, msg: EventMessage, nowMs: number): ViewState {
  const gap = state.lastSeq > 0 && msg.seq !== state.lastSeq + 1;
  const next: ViewState = { ...state, lastSeq: msg.seq, needsResync: state.needsResync || gap };
  switch (msg.event) {
    case "state": {
      const d = msg.data;
      next.sessionActive = d.session_active;
      next.targets = [...d.targets];
      next.alpha = d.alpha;
      next.classes = [...d.classes];
      next.profiles = [...d.profiles];
      next.drafts = [...d.drafts];
      // a state event resolves any optimistic edits and resyncs
      next.needsResync = false;
      return next;
    }
    case "suggestion": {
      const s = msg.data;
      const ttlMs = Math.max(0, (s.expiry - s.created) * 1000);
      const banner: Banner = { ...s, expiresAtMs: nowMs + ttlMs };
      next.banners = [...state.banners.filter((b) => b.suggestion_id !== s.suggestion_id), banner];
      return next;
    }
    case "detection":
      next.lastDetection = msg.data;
      return next;
    case "metrics":
      next.metrics = msg.data;
      return next;
    case "error":
      return next;
  }
}

/** Drop banners whose countdown has elapsed. */
export function expireBanners(state: ViewState, nowMs: number): ViewState {
  const live = state.banners.filter((b) => b.expiresAtMs > nowMs);
  if (live.length === state.banners.length) return state;
  return { ...state, banners: live };
}

export function dismissBanner(state: ViewState, suggestionId: string): ViewState {
  return { ...state, banners: state.banners.filter((b) => b.suggestion_id !== suggestionId) };
}

/** Optimistic chip toggle; the server's state event is authoritative. */
export function optimisticToggle(state: ViewState, classId: string): ViewState {
  if (state.targets.includes(classId)) {
    return { ...state, targets: state.targets.filter((t) => t !== classId) };
  }
  if (!canAddTarget(state, classId)) return state;
  return { ...state, targets: [...state.targets, classId] };
}

export function optimisticAlpha(state: ViewState, alpha: number): ViewState {
  return { ...state, alpha: Math.min(1, Math.max(0, alpha)) };
}

export function setConnected(state: ViewState, connected: boolean): ViewState {
  return connected
    ? { ...state, connected: true }
    : { ...state, connected: false, needsResync: true };
}
