// Round-trip against a live control service: chip toggles and slider moves
// come back as state events and re-render; the fourth chip is refused; an
// accepted suggestion lands in the target set.

import { spawn, ChildProcess } from "node:child_process";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import WebSocket from "ws";

import { ServiceConnection } from "../src/net.js";
import { EventMessage, isEvent } from "../src/protocol.js";
import { applyEvent, initialState, ViewState } from "../src/state.js";

const HOP_MS = 25;
const here = dirname(fileURLToPath(import.meta.url));

let proc: ChildProcess;
let wsPort = 0;
let conn: ServiceConnection;
let view: ViewState = initialState();
const waiters: Array<(v: ViewState) => void> = [];

function nextRender(predicate: (v: ViewState) => boolean, timeoutMs = 5000): Promise<ViewState> {
  return new Promise((resolve, reject) => {
    if (predicate(view)) {
      resolve(view);
      return;
    }
    const timer = setTimeout(() => reject(new Error("timed out waiting for state")), timeoutMs);
    waiters.push(function check(v: ViewState) {
      if (predicate(v)) {
        clearTimeout(timer);
        resolve(v);
      } else {
        waiters.push(check);
      }
    });
  });
}

beforeAll(async () => {
  proc = spawn("python3", [join(here, "service_harness.py")], {
    cwd: join(here, "..", ".."),
    stdio: ["pipe", "pipe", "inherit"],
  });
  wsPort = await new Promise<number>((resolve, reject) => {
    const timer = setTimeout(() => reject(new Error("service did not start")), 30000);
    proc.stdout!.on("data", (buf: Buffer) => {
      const m = /READY (\d+)/.exec(buf.toString());
      if (m) {
        clearTimeout(timer);
        resolve(parseInt(m[1], 10));
      }
    });
  });

  conn = new ServiceConnection(
    `ws://127.0.0.1:${wsPort}`,
    {
      onEvent: (msg) => {
        if (isEvent(msg)) {
          view = applyEvent(view, msg as EventMessage, Date.now());
          waiters.splice(0).forEach((w) => w(view));
        }
      },
    },
    (url) => new WebSocket(url) as unknown as globalThis.WebSocket,
  );
  conn.connect();
  await nextRender((v) => v.sessionActive, 10000);
}, 45000);

afterAll(() => {
  conn?.close();
  proc?.stdin?.end();
  proc?.kill();
});

describe("live round trips", () => {
  it("chip toggle reflects in a state event within one hop period", async () => {
    const t0 = Date.now();
    const reply = await conn.command("set_targets", { targets: ["siren"] });
    expect(reply.ok).toBe(true);
    const v = await nextRender((s) => s.targets.includes("siren"));
    expect(Date.now() - t0).toBeLessThan(HOP_MS + 250); // hop period + transit slack
    expect(v.targets).toEqual(["siren"]);
  });

  it("slider change reflects in a state event and re-renders", async () => {
    const reply = await conn.command("set_strength", { alpha: 0.35 });
    expect(reply.ok).toBe(true);
    const v = await nextRender((s) => Math.abs(s.alpha - 0.35) < 1e-9);
    expect(v.alpha).toBeCloseTo(0.35, 9);
  });

  it("a fourth chip is blocked by the server cap", async () => {
    const ok = await conn.command("set_targets", {
      targets: ["siren", "alarm_clock", "water_running"],
    });
    expect(ok.ok).toBe(true);
    const over = await conn.command("set_targets", {
      targets: ["siren", "alarm_clock", "water_running", "keyboard_typing"],
    });
    expect(over.ok).toBe(false);
    expect(over.error).toMatch(/TargetCap/);
    await conn.command("set_targets", { targets: [] });
  });

  it("accepting a suggestion adds the target", async () => {
    await conn.command("set_targets", { targets: [] });
    const v = await nextRender((s) => s.banners.length > 0, 20000);
    const banner = v.banners[0];
    expect(banner.class_id).toBeTruthy();
    const reply = await conn.command("accept_suggestion", {
      suggestion_id: banner.suggestion_id,
    });
    expect(reply.ok).toBe(true);
    const after = await nextRender((s) => s.targets.includes(banner.class_id!));
    expect(after.targets).toContain(banner.class_id);
  }, 30000);
});
