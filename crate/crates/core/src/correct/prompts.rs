//! Prompt strings. The first two are fixed texts and must not be edited.

/// System prompt sent with a recognizer transcription for post-correction.
pub const CORRECTION_PROMPT: &str = "I ran a handwriting recognition neural network on a medieval English legal case, written in Latin.  Please try to correct the mistakes.  The neural network doesn't typically add or remove entire words, so try to keep a similar word count, if possible.  Also, preserve the line breaks at all costs.  If you see a very short line, don't delete it or merge it with the previous or next line, because it's likely an interlinear addition.  Keep in mind that this is medieval, not classical, Latin.  Please don't add punctuation unless necessary, because these documents usually don't have much punctuation.  Do not output anything other than the corrected transcription--no explanations, comments, or alternatives.";

/// Prompt sent with a page image to ask for a transcription directly.
pub const TRANSCRIPTION_PROMPT: &str = "Attached is a medieval English legal case, written in Latin. Please transcribe it line by line in vertical order, and don't output anything other than the transcription. Interlinear additions count as independent lines. Transparently expand all abbreviations and don't put the expansion in square brackets. Don't add punctuation that isn't in the manuscript. When you're not sure, take your best guess instead of putting [?] or indicating multiple possible alternatives.";

/// Instruction for English translation of a Latin transcription.
pub const TRANSLATION_PROMPT: &str = "Translate the following transcription of a medieval English legal case, written in Latin, into modern English. Do not output anything other than the translation.";
