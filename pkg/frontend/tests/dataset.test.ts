import { mkdtempSync, readFileSync, rmSync, writeFileSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { dirname, join } from 'node:path';
import { fileURLToPath } from 'node:url';
import { afterAll, describe, expect, it } from 'vitest';

import { BundleFormatError } from '../src/bundle.js';
import { iterateDataset, readSplit, splitOrder } from '../src/dataset.js';

const HERE = dirname(fileURLToPath(import.meta.url));
const FIXTURES = join(HERE, '..', '.fixtures');
const BUNDLES = join(FIXTURES, 'bundles');
const SPLIT = join(FIXTURES, 'splits', 'split.csv');
const scratchDirs: string[] = [];

function scratch(): string {
  const dir = mkdtempSync(join(tmpdir(), 'dataset-'));
  scratchDirs.push(dir);
  return dir;
}

afterAll(() => {
  for (const dir of scratchDirs) rmSync(dir, { recursive: true, force: true });
});

describe('readSplit', () => {
  it('parses the pipeline split file', () => {
    const split = readSplit(SPLIT);
    expect(split.mode).toBe('cv5');
    expect(split.k).toBe(5);
    expect(split.entries).toHaveLength(10);
    for (const entry of split.entries) {
      expect(typeof entry.tag).toBe('number');
      expect(entry.tag).toBeGreaterThanOrEqual(0);
      expect(entry.tag).toBeLessThan(5);
    }
  });

  it('ten specimens in cv5 make five folds of two', () => {
    const split = readSplit(SPLIT);
    const sizes = new Map<number, number>();
    for (const entry of split.entries) {
      const fold = entry.tag as number;
      sizes.set(fold, (sizes.get(fold) ?? 0) + 1);
    }
    expect([...sizes.values()]).toEqual([2, 2, 2, 2, 2]);
  });
});

describe('iterateDataset', () => {
  it('yields every specimen in deterministic split order', () => {
    const items = [...iterateDataset(BUNDLES, SPLIT)];
    expect(items).toHaveLength(10);
    const tags = items.map((i) => i.tag as number);
    expect(tags).toEqual([...tags].sort((a, b) => a - b));
    for (const item of items) {
      expect(item.graph.metadata.specimenId).toBe(item.specimenId);
    }
  });

  it('same call twice gives the same order', () => {
    const a = [...iterateDataset(BUNDLES, SPLIT)].map((i) => i.specimenId);
    const b = [...iterateDataset(BUNDLES, SPLIT)].map((i) => i.specimenId);
    expect(a).toEqual(b);
    const expectedOrder = splitOrder(readSplit(SPLIT)).map((e) => e.specimenId);
    expect(a).toEqual(expectedOrder);
  });

  it('empty split over an empty root yields nothing', () => {
    const root = scratch();
    const splitPath = join(root, 'empty.csv');
    writeFileSync(splitPath, 'mode=cv5\nseed=0\nk=5\nrng=pcg64\n');
    expect([...iterateDataset(root, splitPath)]).toEqual([]);
  });

  it('specimen in the split but missing on disk is an error', () => {
    const root = scratch();
    const splitPath = join(root, 'missing.csv');
    const line = readFileSync(SPLIT, 'utf8')
      .split('\n')
      .find((l) => l.startsWith('specimen='));
    writeFileSync(splitPath, `mode=cv5\nseed=0\nk=5\n${line}\n`);
    expect(() => [...iterateDataset(root, splitPath)]).toThrowError(BundleFormatError);
  });

  it('partition splits order train before val before test', () => {
    const root = scratch();
    const splitPath = join(root, 'tvt.csv');
    writeFileSync(
      splitPath,
      [
        'mode=train-val-test',
        'seed=0',
        'k=5',
        'specimen=sa,2-III,test',
        'specimen=sb,2-III,train',
        'specimen=sc,2-III,val',
        '',
      ].join('\n'),
    );
    const order = splitOrder(readSplit(splitPath)).map((e) => e.tag);
    expect(order).toEqual(['train', 'val', 'test']);
  });
});
