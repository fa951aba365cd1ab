// Strict reader for feature-bundle directories written by the pipeline.
// One directory per specimen: header.txt (metadata, ordered manifest,
// sha256 checksums) plus little-endian payloads nodes.f32,
// edges_index.u32, edges.f32 and optionally labels.u8. The reader never
// recomputes features; it only materializes and validates arrays.

import { createHash } from 'node:crypto';
import { existsSync, readFileSync } from 'node:fs';
import { join } from 'node:path';

export const BUNDLE_VERSION = 1;

export class BundleFormatError extends Error {
  constructor(message: string) {
    super(message);
    this.name = 'BundleFormatError';
  }
}

export interface ManifestEntry {
  name: string;
  width: number;
  kind: string;
  normalization: string;
}

export interface BundleMetadata {
  formatVersion: number;
  specimenId: string;
  stage: string;
  frameMethod?: string;
  kSamples?: number;
  normScope?: string;
}

export interface LoadedGraph {
  nNodes: number;
  nodeWidth: number;
  nodeMatrix: Float32Array; // row major, nNodes x nodeWidth
  nEdges: number;
  edgeIndex: Uint32Array; // 2 x nEdges, row0 < row1 per column
  edgeWidth: number;
  edgeMatrix: Float32Array; // nEdges x edgeWidth
  labels?: Uint8Array;
  nodeManifest: ManifestEntry[];
  edgeManifest: ManifestEntry[];
  metadata: BundleMetadata;
  checksums: Record<string, string>; // recomputed sha256 per payload file
}

interface Header {
  fields: Map<string, string>;
  nodeManifest: ManifestEntry[];
  edgeManifest: ManifestEntry[];
}

function parseManifestLine(value: string, path: string): ManifestEntry {
  const parts = value.split(',');
  if (parts.length !== 4) {
    throw new BundleFormatError(`${path}: malformed manifest entry '${value}'`);
  }
  const width = Number(parts[1]);
  if (!Number.isInteger(width) || width < 1) {
    throw new BundleFormatError(`${path}: bad manifest width in '${value}'`);
  }
  return {
    name: parts[0]!,
    width,
    kind: parts[2]!,
    normalization: parts[3]!,
  };
}

function parseHeader(text: string, path: string): Header {
  const fields = new Map<string, string>();
  const nodeManifest: ManifestEntry[] = [];
  const edgeManifest: ManifestEntry[] = [];
  for (const rawLine of text.split('\n')) {
    const line = rawLine.trim();
    if (!line) continue;
    const eq = line.indexOf('=');
    if (eq < 0) {
      throw new BundleFormatError(`${path}: header line without '=': '${line}'`);
    }
    const key = line.slice(0, eq);
    const value = line.slice(eq + 1);
    if (key === 'node_block') {
      nodeManifest.push(parseManifestLine(value, path));
    } else if (key === 'edge_block') {
      edgeManifest.push(parseManifestLine(value, path));
    } else {
      fields.set(key, value);
    }
  }
  return { fields, nodeManifest, edgeManifest };
}

function requiredInt(header: Header, key: string, path: string): number {
  const raw = header.fields.get(key);
  if (raw === undefined) {
    throw new BundleFormatError(`${path}: missing header field '${key}'`);
  }
  const value = Number(raw);
  if (!Number.isInteger(value) || value < 0) {
    throw new BundleFormatError(`${path}: field '${key}' is not a count: '${raw}'`);
  }
  return value;
}

function sha256Hex(payload: Buffer): string {
  return createHash('sha256').update(payload).digest('hex');
}

// Payload buffers may be unaligned pool slices; copy before viewing.
function alignedBuffer(payload: Buffer): ArrayBuffer {
  const out = new ArrayBuffer(payload.byteLength);
  new Uint8Array(out).set(payload);
  return out;
}

function loadPayload(
  dir: string,
  fname: string,
  header: Header,
  expectedBytes: number,
  checksums: Record<string, string>,
): ArrayBuffer {
  const path = join(dir, fname);
  if (!existsSync(path)) {
    throw new BundleFormatError(`missing payload ${path}`);
  }
  const payload = readFileSync(path);
  const checksumKey = `sha256_${fname.replace('.', '_')}`;
  const declared = header.fields.get(checksumKey);
  if (declared === undefined) {
    throw new BundleFormatError(`${dir}: header lacks checksum '${checksumKey}'`);
  }
  const digest = sha256Hex(payload);
  if (digest !== declared) {
    throw new BundleFormatError(`${path}: checksum mismatch`);
  }
  if (payload.byteLength !== expectedBytes) {
    throw new BundleFormatError(
      `${path}: expected ${expectedBytes} bytes, found ${payload.byteLength}`,
    );
  }
  checksums[fname] = digest;
  return alignedBuffer(payload);
}

function manifestWidth(entries: ManifestEntry[]): number {
  return entries.reduce((total, entry) => total + entry.width, 0);
}

/** Load and fully validate one bundle directory. */
export function loadBundle(dir: string): LoadedGraph {
  const headerPath = join(dir, 'header.txt');
  if (!existsSync(headerPath)) {
    throw new BundleFormatError(`missing header ${headerPath}`);
  }
  const header = parseHeader(readFileSync(headerPath, 'utf8'), headerPath);

  const version = requiredInt(header, 'format_version', headerPath);
  if (version !== BUNDLE_VERSION) {
    throw new BundleFormatError(`${headerPath}: unknown bundle version ${version}`);
  }
  const nNodes = requiredInt(header, 'n_nodes', headerPath);
  const nEdges = requiredInt(header, 'n_edges', headerPath);
  const nodeWidth = requiredInt(header, 'node_width', headerPath);
  const edgeWidth = requiredInt(header, 'edge_width', headerPath);
  if (manifestWidth(header.nodeManifest) !== nodeWidth) {
    throw new BundleFormatError(`${headerPath}: node manifest widths do not sum to node_width`);
  }
  if (manifestWidth(header.edgeManifest) !== edgeWidth) {
    throw new BundleFormatError(`${headerPath}: edge manifest widths do not sum to edge_width`);
  }

  const checksums: Record<string, string> = {};
  const nodeMatrix = new Float32Array(
    loadPayload(dir, 'nodes.f32', header, nNodes * nodeWidth * 4, checksums),
  );
  const edgeIndex = new Uint32Array(
    loadPayload(dir, 'edges_index.u32', header, 2 * nEdges * 4, checksums),
  );
  const edgeMatrix = new Float32Array(
    loadPayload(dir, 'edges.f32', header, nEdges * edgeWidth * 4, checksums),
  );
  let labels: Uint8Array | undefined;
  if (header.fields.has('sha256_labels_u8') || existsSync(join(dir, 'labels.u8'))) {
    labels = new Uint8Array(loadPayload(dir, 'labels.u8', header, nNodes, checksums));
  }

  for (let e = 0; e < nEdges; e += 1) {
    const lo = edgeIndex[e]!;
    const hi = edgeIndex[nEdges + e]!;
    if (lo >= hi || hi >= nNodes) {
      throw new BundleFormatError(`${dir}: edge ${e} has invalid endpoints (${lo}, ${hi})`);
    }
  }

  const metadata: BundleMetadata = {
    formatVersion: version,
    specimenId: header.fields.get('specimen_id') ?? '',
    stage: header.fields.get('stage') ?? '',
  };
  const frameMethod = header.fields.get('frame_method');
  if (frameMethod !== undefined) metadata.frameMethod = frameMethod;
  const kSamples = header.fields.get('k_samples');
  if (kSamples !== undefined) metadata.kSamples = Number(kSamples);
  const normScope = header.fields.get('norm_scope');
  if (normScope !== undefined) metadata.normScope = normScope;

  return {
    nNodes,
    nodeWidth,
    nodeMatrix,
    nEdges,
    edgeIndex,
    edgeWidth,
    edgeMatrix,
    nodeManifest: header.nodeManifest,
    edgeManifest: header.edgeManifest,
    metadata,
    checksums,
    ...(labels !== undefined ? { labels } : {}),
  };
}
