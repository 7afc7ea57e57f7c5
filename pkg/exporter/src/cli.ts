#!/usr/bin/env node
/**
 * export-embeddings:   batch transcript (and source) sentences through a
 *                      locally available encoder into an embedding file.
 * export-topic-labels: train the MLP topic-classifier variant on supplied
 *                      distant-supervision samples, label every sentence.
 *
 * Only the deterministic "hash-v1" encoder ships here; real sentence models
 * plug in through the same registry.
 */

import { readFileSync, writeFileSync } from "node:fs";
import { hashEmbed } from "./hash.js";
import { serializeEmbeddingFile, parseEmbeddingFile, EmbeddingRow } from "./embedfile.js";
import {
  collectSentences,
  formatAssignments,
  parseSamples,
  parseSourceSentences,
  parseTranscripts,
} from "./records.js";
import { assign, trainTopicClassifier } from "./topichead.js";

interface EncoderSpec {
  name: string;
  dim: number;
  encode: (text: string) => Float64Array;
}

function resolveEncoder(name: string, dim: number, seed: number): EncoderSpec {
  if (name === "hash-v1") {
    return { name, dim, encode: (text) => hashEmbed(text, dim, seed) };
  }
  throw new Error(`encoder ${name} is not available locally`);
}

function parseArgs(argv: string[]): Map<string, string> {
  const out = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    if (!key.startsWith("--") || i + 1 >= argv.length) {
      throw new Error(`bad arguments near ${key}`);
    }
    out.set(key.slice(2), argv[i + 1]);
  }
  return out;
}

function need(args: Map<string, string>, key: string): string {
  const value = args.get(key);
  if (value === undefined) {
    throw new Error(`missing required flag --${key}`);
  }
  return value;
}

export function exportEmbeddings(args: Map<string, string>): void {
  const transcripts = parseTranscripts(readFileSync(need(args, "in"), "utf-8"));
  const source = args.has("source")
    ? parseSourceSentences(readFileSync(args.get("source")!, "utf-8"))
    : [];
  const dim = Number(args.get("dim") ?? "512");
  const seed = Number(args.get("seed") ?? "0");
  const batchSize = Number(args.get("batch") ?? "64");
  const encoder = resolveEncoder(args.get("encoder") ?? "hash-v1", dim, seed);

  const sentences = collectSentences(transcripts, source);
  const rows: EmbeddingRow[] = [];
  for (let start = 0; start < sentences.length; start += batchSize) {
    for (const [sid, text] of sentences.slice(start, start + batchSize)) {
      const vec = encoder.encode(text);
      if (vec.length !== dim) {
        throw new Error(`encoder ${encoder.name} returned width ${vec.length}, want ${dim}`);
      }
      for (const v of vec) {
        if (!Number.isFinite(v)) {
          throw new Error(`non-finite embedding for ${sid}`);
        }
      }
      rows.push({ id: sid, values: Float32Array.from(vec) });
    }
  }
  const blob = serializeEmbeddingFile({ dim, encoderName: encoder.name, rows });
  writeFileSync(need(args, "out"), blob);
  console.log(`export-embeddings: ${rows.length} rows (dim ${dim}) -> ${args.get("out")}`);
}

export function exportTopicLabels(args: Map<string, string>): void {
  const samples = parseSamples(readFileSync(need(args, "samples"), "utf-8"));
  if (samples.length === 0) {
    throw new Error("no distant-supervision samples supplied");
  }
  const embeddings = parseEmbeddingFile(readFileSync(need(args, "embeddings")));
  const byId = new Map(embeddings.rows.map((r) => [r.id, r.values]));
  const toF64 = (values: Float32Array) => Float64Array.from(values);

  const X: Float64Array[] = [];
  const y: number[] = [];
  for (const [sid, label] of samples) {
    const vec = byId.get(sid);
    if (vec === undefined) {
      throw new Error(`sample ${sid} has no embedding`);
    }
    X.push(toF64(vec));
    y.push(label);
  }
  const numLabels = Math.max(...y) + 1;
  const model = trainTopicClassifier(X, y, numLabels, {
    hidden: Number(args.get("hidden") ?? "32"),
    epochs: Number(args.get("epochs") ?? "300"),
    lr: Number(args.get("lr") ?? "0.3"),
    seed: Number(args.get("seed") ?? "0"),
  });

  const assignments: Array<[string, number, number]> = [];
  const ids = embeddings.rows.map((r) => r.id).sort();
  for (const sid of ids) {
    const [label, confidence] = assign(model, toF64(byId.get(sid)!));
    assignments.push([sid, label, confidence]);
  }
  writeFileSync(need(args, "out"), formatAssignments(assignments));
  console.log(`export-topic-labels: ${assignments.length} assignments -> ${args.get("out")}`);
}

export function main(argv: string[]): number {
  try {
    const [command, ...rest] = argv;
    const args = parseArgs(rest);
    if (command === "export-embeddings") {
      exportEmbeddings(args);
    } else if (command === "export-topic-labels") {
      exportTopicLabels(args);
    } else {
      console.error("usage: mtca-export {export-embeddings|export-topic-labels} --flags ...");
      return 2;
    }
    return 0;
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

const invokedDirectly =
  process.argv[1] !== undefined && import.meta.url === new URL(`file://${process.argv[1]}`).href;
if (invokedDirectly) {
  process.exit(main(process.argv.slice(2)));
}
