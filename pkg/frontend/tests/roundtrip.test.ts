/** End-to-end round trip against the real Python service: create a session,
 * wait out the abduction, and check the studio's core contracts — the β=−1
 * card is the server's reconstruction (identical hash on repeat), and the
 * exported provenance echo is byte-identical to the server record. */

import { spawn, type ChildProcess } from "node:child_process";
import { readFile } from "node:fs/promises";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { StudioApi } from "../src/api.js";
import { exportCard } from "../src/exporter.js";
import { galleryFromRecords } from "../src/state.js";

let server: ChildProcess;
let api: StudioApi;
let sourcePng: Buffer;
let sessionId: string;

const TINY_CONFIG = { iterations: 4, rank_u: 8, rank_delta: 4, checkpoint_iters: [2, 4] };

beforeAll(async () => {
  server = spawn("python3", [new URL("serve_tiny.py", import.meta.url).pathname], {
    stdio: ["ignore", "pipe", "inherit"],
  });
  const ready = await new Promise<string>((resolve, reject) => {
    let buffer = "";
    server.stdout!.on("data", (chunk: Buffer) => {
      buffer += chunk.toString();
      const line = buffer.split("\n").find((l) => l.startsWith("READY"));
      if (line) resolve(line);
    });
    server.on("exit", (code) => reject(new Error(`server exited early (${code})`)));
    setTimeout(() => reject(new Error("server start timed out")), 60_000);
  });
  const [, port, pngPath] = ready.trim().split(" ");
  api = new StudioApi(`http://127.0.0.1:${port}`);
  sourcePng = await readFile(pngPath!);
  for (let i = 0; ; i++) {
    try {
      await api.getJob("warmup-probe");
      break;
    } catch (err) {
      if (String(err).includes("404")) break; // server is answering
      if (i > 100) throw err;
      await new Promise((r) => setTimeout(r, 100));
    }
  }
}, 90_000);

afterAll(() => {
  server?.kill();
});

describe("studio round trip", () => {
  it("creates a session and completes abduction", async () => {
    const created = await api.createSession(
      new Blob([sourcePng], { type: "image/png" }),
      "a red circle",
      "a blue circle",
      TINY_CONFIG,
    );
    sessionId = created.session_id;
    const job = await api.waitForJob(created.job_id, { intervalMs: 200 });
    expect(job.status).toBe("done");
    const manifest = await api.getSession(sessionId);
    expect(manifest.status).toBe("done");
    expect(manifest.prompts.p_prime).toBe("a blue circle");
  }, 120_000);

  it("β = −1 card hash equals the server reconstruction hash on repeat", async () => {
    const body = { beta: -1, seed: 0, steps: 4 };
    const first = await api.waitForJob((await api.requestEdit(sessionId, body)).job_id);
    expect(first.status).toBe("done");
    const second = await api.waitForJob((await api.requestEdit(sessionId, body)).job_id);
    expect(second.result.hashes).toEqual(first.result.hashes);
    expect(second.result.cached).toBe(true);

    const cards = galleryFromRecords(await api.listEdits(sessionId));
    const recon = cards.find((c) => c.beta === -1 && c.seed === 0);
    expect(recon?.label).toBe("reconstruction");
    expect(recon?.hash).toBe(first.result.hashes![0]);
  }, 120_000);

  it("exported echo JSON is byte-identical to the server record", async () => {
    const cards = galleryFromRecords(await api.listEdits(sessionId));
    const card = cards[0]!;
    const bundle = await exportCard(api, card);
    const serverRecord = await api.recordBytes(card.hash);
    expect(Buffer.from(bundle.echo).equals(Buffer.from(serverRecord))).toBe(true);
    // and the echo parses back to the request the card was built from
    const parsed = JSON.parse(new TextDecoder().decode(bundle.echo));
    expect(parsed.hash).toBe(card.hash);
    expect(parsed.request.beta).toBe(card.beta);
    // the PNG is the content-addressed artifact itself
    expect(bundle.pngName).toBe(`${card.hash}.png`);
    expect(bundle.png.byteLength).toBeGreaterThan(0);
  }, 60_000);

  it("surfaces server validation errors (422 beta)", async () => {
    await expect(api.requestEdit(sessionId, { beta: 2 })).rejects.toThrow(/422/);
  });
});
