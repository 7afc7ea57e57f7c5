export { fnv1a64, hashEmbed, tokenVector, tokenize } from "./hash.js";
export {
  EmbeddingFileData,
  EmbeddingRow,
  FORMAT_VERSION,
  parseEmbeddingFile,
  serializeEmbeddingFile,
} from "./embedfile.js";
export {
  SourceSentence,
  Transcript,
  collectSentences,
  formatAssignments,
  parseSamples,
  parseSourceSentences,
  parseTranscripts,
  sentenceId,
} from "./records.js";
export {
  MlpTopicClassifier,
  assign,
  probabilities,
  trainTopicClassifier,
} from "./topichead.js";
export { main } from "./cli.js";
