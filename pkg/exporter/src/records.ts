/** Transcript / source-sentence JSONL parsing and assignment TSV output. */

export interface Transcript {
  id: string;
  ticker: string;
  date: string;
  session: string;
  sentences: string[];
  label?: number;
}

export interface SourceSentence {
  id: string;
  text: string;
  session?: string | null;
}

export function parseTranscripts(text: string): Transcript[] {
  const out: Transcript[] = [];
  const lines = text.split("\n");
  for (let i = 0; i < lines.length; i++) {
    const line = lines[i].trim();
    if (!line) continue;
    let obj: any;
    try {
      obj = JSON.parse(line);
    } catch {
      throw new Error(`line ${i + 1}: invalid JSON`);
    }
    if (
      typeof obj.id !== "string" ||
      !Array.isArray(obj.sentences) ||
      obj.sentences.length === 0
    ) {
      throw new Error(`line ${i + 1}: malformed transcript record`);
    }
    out.push(obj as Transcript);
  }
  return out;
}

export function parseSourceSentences(text: string): SourceSentence[] {
  const out: SourceSentence[] = [];
  const lines = text.split("\n");
  for (let i = 0; i < lines.length; i++) {
    const line = lines[i].trim();
    if (!line) continue;
    const obj = JSON.parse(line);
    if (typeof obj.id !== "string" || typeof obj.text !== "string") {
      throw new Error(`line ${i + 1}: malformed source sentence`);
    }
    out.push(obj as SourceSentence);
  }
  return out;
}

export function sentenceId(transcriptId: string, index: number): string {
  return `${transcriptId}:${index}`;
}

/** Every (sentenceId, text) pair across transcripts plus source sentences. */
export function collectSentences(
  transcripts: Transcript[],
  source: SourceSentence[] = [],
): Array<[string, string]> {
  const out: Array<[string, string]> = [];
  for (const t of transcripts) {
    t.sentences.forEach((text, i) => out.push([sentenceId(t.id, i), text]));
  }
  for (const s of source) {
    out.push([s.id, s.text]);
  }
  return out;
}

/** Distant-supervision sample file: sentence_id<TAB>label per line. */
export function parseSamples(text: string): Array<[string, number]> {
  const out: Array<[string, number]> = [];
  for (const line of text.split("\n")) {
    if (!line.trim()) continue;
    const [sid, label] = line.split("\t");
    if (sid === undefined || label === undefined || Number.isNaN(Number(label))) {
      throw new Error(`malformed sample line: ${line}`);
    }
    out.push([sid, Number(label)]);
  }
  return out;
}

/** Topic-assignment records: sentence_id<TAB>topic<TAB>confidence(6dp). */
export function formatAssignments(rows: Array<[string, number, number]>): string {
  return rows.map(([sid, topic, conf]) => `${sid}\t${topic}\t${conf.toFixed(6)}`).join("\n") + "\n";
}
