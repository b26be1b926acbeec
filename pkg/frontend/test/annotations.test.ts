import { createServer, Server } from "node:http";
import { AddressInfo } from "node:net";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { Annotations, ApiClient } from "../src/api.js";

// Minimal annotation store stub: remembers the exact bytes POSTed per
// volume and serves them back verbatim, like the real service does with
// its canonical JSON files.
let server: Server;
let baseUrl: string;
const stored = new Map<string, Buffer>();

beforeAll(async () => {
  server = createServer((req, res) => {
    const match = req.url?.match(/^\/volumes\/([^/]+)\/annotations$/);
    if (!match) {
      res.writeHead(404).end();
      return;
    }
    const volumeId = match[1];
    if (req.method === "POST") {
      const chunks: Buffer[] = [];
      req.on("data", (c) => chunks.push(c));
      req.on("end", () => {
        stored.set(volumeId, Buffer.concat(chunks));
        res.writeHead(200, { "Content-Type": "application/json" });
        res.end(JSON.stringify({ status: "stored" }));
      });
      return;
    }
    const body = stored.get(volumeId);
    if (!body) {
      res.writeHead(404).end();
      return;
    }
    res.writeHead(200, { "Content-Type": "application/json" });
    res.end(body);
  });
  await new Promise<void>((resolve) => server.listen(0, resolve));
  baseUrl = `http://127.0.0.1:${(server.address() as AddressInfo).port}`;
});

afterAll(async () => {
  await new Promise<void>((resolve, reject) =>
    server.close((err) => (err ? reject(err) : resolve())),
  );
});

const SAMPLE: Annotations = {
  waypoints: [
    {
      stage: "Examine CCA proximal",
      pose: { position: [10, 0, 4], quaternion: [0, 0, 0, 1] },
      name: "start",
    },
    {
      stage: "Transverse scan completed",
      pose: {
        position: [10.25, -0.5, 14],
        quaternion: [0, 0.0436194, 0, 0.9990482],
      },
      name: "bifurcation",
    },
  ],
};

describe("annotation round trip", () => {
  it("save then load returns byte-identical JSON", async () => {
    const client = new ApiClient(baseUrl);
    await client.saveAnnotations("phantom", SAMPLE);

    const resp = await fetch(`${baseUrl}/volumes/phantom/annotations`);
    const rawBack = Buffer.from(await resp.arrayBuffer());
    expect(rawBack.equals(Buffer.from(JSON.stringify(SAMPLE)))).toBe(true);

    const loaded = await client.loadAnnotations("phantom");
    expect(loaded).toEqual(SAMPLE);
    expect(JSON.stringify(loaded)).toBe(JSON.stringify(SAMPLE));
  });

  it("loading an unannotated volume fails with a clear error", async () => {
    const client = new ApiClient(baseUrl);
    await expect(client.loadAnnotations("missing")).rejects.toThrow("404");
  });
});
