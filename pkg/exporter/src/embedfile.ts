/**
 * Binary embedding file ("MEMB") reader/writer.
 *
 * Layout, all integers little-endian uint32:
 *   magic "MEMB" | version | dim | count | nameLen | encoderName utf8
 *   then per row: idLen | sentenceId utf8 | dim float32 values
 */

const MAGIC = "MEMB";
export const FORMAT_VERSION = 1;

export interface EmbeddingRow {
  id: string;
  values: Float32Array;
}

export interface EmbeddingFileData {
  dim: number;
  encoderName: string;
  rows: EmbeddingRow[];
}

export function serializeEmbeddingFile(data: EmbeddingFileData): Uint8Array {
  const encoder = new TextEncoder();
  const nameRaw = encoder.encode(data.encoderName);
  const idRaws = data.rows.map((r) => encoder.encode(r.id));
  let size = 4 + 12 + 4 + nameRaw.length;
  for (let i = 0; i < data.rows.length; i++) {
    if (data.rows[i].values.length !== data.dim) {
      throw new Error(
        `row ${data.rows[i].id} has ${data.rows[i].values.length} values, want ${data.dim}`,
      );
    }
    size += 4 + idRaws[i].length + 4 * data.dim;
  }
  const out = new Uint8Array(size);
  const view = new DataView(out.buffer);
  let offset = 0;
  out.set(encoder.encode(MAGIC), offset);
  offset += 4;
  view.setUint32(offset, FORMAT_VERSION, true);
  view.setUint32(offset + 4, data.dim, true);
  view.setUint32(offset + 8, data.rows.length, true);
  offset += 12;
  view.setUint32(offset, nameRaw.length, true);
  offset += 4;
  out.set(nameRaw, offset);
  offset += nameRaw.length;
  for (let i = 0; i < data.rows.length; i++) {
    view.setUint32(offset, idRaws[i].length, true);
    offset += 4;
    out.set(idRaws[i], offset);
    offset += idRaws[i].length;
    for (const value of data.rows[i].values) {
      view.setFloat32(offset, value, true);
      offset += 4;
    }
  }
  return out;
}

export function parseEmbeddingFile(blob: Uint8Array): EmbeddingFileData {
  const decoder = new TextDecoder();
  if (decoder.decode(blob.subarray(0, 4)) !== MAGIC) {
    throw new Error("not an embedding file (bad magic)");
  }
  const view = new DataView(blob.buffer, blob.byteOffset, blob.byteLength);
  const version = view.getUint32(4, true);
  if (version !== FORMAT_VERSION) {
    throw new Error(`unsupported embedding file version ${version}`);
  }
  const dim = view.getUint32(8, true);
  const count = view.getUint32(12, true);
  const nameLen = view.getUint32(16, true);
  let offset = 20;
  const encoderName = decoder.decode(blob.subarray(offset, offset + nameLen));
  offset += nameLen;
  const rows: EmbeddingRow[] = [];
  for (let i = 0; i < count; i++) {
    const idLen = view.getUint32(offset, true);
    offset += 4;
    const id = decoder.decode(blob.subarray(offset, offset + idLen));
    offset += idLen;
    const values = new Float32Array(dim);
    for (let j = 0; j < dim; j++) {
      values[j] = view.getFloat32(offset, true);
      offset += 4;
    }
    rows.push({ id, values });
  }
  if (offset !== blob.length) {
    throw new Error(`${blob.length - offset} trailing bytes`);
  }
  return { dim, encoderName, rows };
}
