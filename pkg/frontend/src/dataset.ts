// Split-ordered iteration over a directory of bundle subdirectories.

import { existsSync, readFileSync } from 'node:fs';
import { join } from 'node:path';

import { BundleFormatError, loadBundle, type LoadedGraph } from './bundle.js';

export type SplitTag = number | 'train' | 'val' | 'test';

export interface SplitEntry {
  specimenId: string;
  stage: string;
  tag: SplitTag;
}

export interface SplitSpec {
  mode: string;
  seed: number;
  k: number;
  entries: SplitEntry[];
}

export interface DatasetItem {
  specimenId: string;
  tag: SplitTag;
  graph: LoadedGraph;
}

const PARTITION_ORDER: Record<string, number> = { train: 0, val: 1, test: 2 };

/** Parse a split file written by the pipeline's split command. */
export function readSplit(path: string): SplitSpec {
  if (!existsSync(path)) {
    throw new BundleFormatError(`missing split file ${path}`);
  }
  let mode: string | undefined;
  let seed = 0;
  let k = 5;
  const entries: SplitEntry[] = [];
  for (const rawLine of readFileSync(path, 'utf8').split('\n')) {
    const line = rawLine.trim();
    if (!line) continue;
    const eq = line.indexOf('=');
    if (eq < 0) {
      throw new BundleFormatError(`${path}: split line without '=': '${line}'`);
    }
    const key = line.slice(0, eq);
    const value = line.slice(eq + 1);
    if (key === 'mode') mode = value;
    else if (key === 'seed') seed = Number(value);
    else if (key === 'k') k = Number(value);
    else if (key === 'specimen') {
      const parts = value.split(',');
      if (parts.length !== 3) {
        throw new BundleFormatError(`${path}: malformed specimen line '${line}'`);
      }
      const rawTag = parts[2]!;
      const tag: SplitTag =
        rawTag in PARTITION_ORDER ? (rawTag as SplitTag) : Number(rawTag);
      if (typeof tag === 'number' && !Number.isInteger(tag)) {
        throw new BundleFormatError(`${path}: bad fold tag '${rawTag}'`);
      }
      entries.push({ specimenId: parts[0]!, stage: parts[1]!, tag });
    }
  }
  if (mode === undefined) {
    throw new BundleFormatError(`${path}: missing mode line`);
  }
  return { mode, seed, k, entries };
}

function tagRank(tag: SplitTag): number {
  return typeof tag === 'number' ? tag : PARTITION_ORDER[tag] ?? 99;
}

/** Deterministic split order: by fold/partition, then by specimen id. */
export function splitOrder(split: SplitSpec): SplitEntry[] {
  return [...split.entries].sort((a, b) => {
    const byTag = tagRank(a.tag) - tagRank(b.tag);
    if (byTag !== 0) return byTag;
    return a.specimenId < b.specimenId ? -1 : a.specimenId > b.specimenId ? 1 : 0;
  });
}

/**
 * Yield specimens in split order, loading each bundle from
 * `root/<specimenId>`. A specimen listed in the split but missing on
 * disk is an error; an empty split yields nothing.
 */
export function* iterateDataset(
  root: string,
  split: SplitSpec | string,
): Generator<DatasetItem> {
  const spec = typeof split === 'string' ? readSplit(split) : split;
  for (const entry of splitOrder(spec)) {
    const dir = join(root, entry.specimenId);
    if (!existsSync(join(dir, 'header.txt'))) {
      throw new BundleFormatError(
        `specimen '${entry.specimenId}' in split but missing under ${root}`,
      );
    }
    yield { specimenId: entry.specimenId, tag: entry.tag, graph: loadBundle(dir) };
  }
}
