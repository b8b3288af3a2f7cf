//! Vocabulary construction, encoding, and truncated-BPTT batching.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{contract, Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenMode {
    Word,
    Char,
}

impl fmt::Display for TokenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenMode::Word => "word",
            TokenMode::Char => "char",
        })
    }
}

impl FromStr for TokenMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TokenMode::Word),
            "char" => Ok(TokenMode::Char),
            other => Err(Error::Contract(format!("unknown token mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabOptions {
    pub mode: TokenMode,
    /// Total vocabulary size including specials.
    pub max_size: usize,
    /// Word mode only.
    pub lowercase: bool,
}

impl VocabOptions {
    pub fn word(max_size: usize) -> Self {
        VocabOptions {
            mode: TokenMode::Word,
            max_size,
            lowercase: false,
        }
    }

    pub fn char() -> Self {
        VocabOptions {
            mode: TokenMode::Char,
            max_size: usize::MAX,
            lowercase: false,
        }
    }
}

/// Bijection between tokens and ids `0..M`.
///
/// Word vocabularies always hold `<unk>` (id 0) and `<eos>` (id 1); ranked
/// tokens follow by descending frequency with lexicographic tie-break.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    mode: TokenMode,
    lowercase: bool,
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(mode: TokenMode, lowercase: bool, id_to_token: Vec<String>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Format(format!("duplicate token {tok:?}")));
            }
        }
        if mode == TokenMode::Word {
            contract!(
                token_to_id.get(UNK) == Some(&0) && token_to_id.get(EOS) == Some(&1),
                "word vocabulary must start with {UNK} and {EOS}"
            );
        }
        Ok(Vocabulary {
            mode,
            lowercase,
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn unk_id(&self) -> Option<usize> {
        (self.mode == TokenMode::Word).then_some(0)
    }

    pub fn eos_id(&self) -> Option<usize> {
        (self.mode == TokenMode::Word).then_some(1)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Header line `mode=<word|char> size=<M>` then one escaped token per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("mode={} size={}", self.mode, self.len());
        if self.lowercase {
            s.push_str(" lowercase=1");
        }
        s.push('\n');
        for tok in &self.id_to_token {
            s.push_str(&escape_token(tok));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty vocabulary file".into()))?;
        let mut mode = None;
        let mut size = None;
        let mut lowercase = false;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("mode", v)) => mode = Some(v.parse::<TokenMode>()?),
                Some(("size", v)) => {
                    size = Some(
                        v.parse::<usize>()
                            .map_err(|_| Error::Format(format!("bad size {v:?}")))?,
                    )
                }
                Some(("lowercase", v)) => lowercase = v == "1",
                _ => return Err(Error::Format(format!("bad vocabulary header {header:?}"))),
            }
        }
        let (mode, size) = match (mode, size) {
            (Some(m), Some(s)) => (m, s),
            _ => return Err(Error::Format(format!("bad vocabulary header {header:?}"))),
        };
        let tokens: Vec<String> = lines
            .take(size)
            .map(unescape_token)
            .collect::<Result<_>>()?;
        if tokens.len() != size {
            return Err(Error::Format(format!(
                "vocabulary header says {size} tokens, found {}",
                tokens.len()
            )));
        }
        Vocabulary::from_tokens(mode, lowercase, tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_text(&text)
    }
}

fn escape_token(tok: &str) -> String {
    let mut out = String::with_capacity(tok.len());
    for c in tok.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_token(line: &str) -> Result<String> {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            other => return Err(Error::Format(format!("bad escape \\{other:?} in vocabulary"))),
        }
    }
    Ok(out)
}

fn word_tokens(line: &str) -> impl Iterator<Item = &str> {
    line.split_whitespace()
}

fn normalize(tok: &str, lowercase: bool) -> String {
    if lowercase {
        tok.to_lowercase()
    } else {
        tok.to_owned()
    }
}

/// Builds a vocabulary from raw text.
///
/// Word mode splits on whitespace and ends every line with `<eos>`; the
/// `max_size − 2` most frequent ordinary tokens are kept. Char mode makes
/// every distinct character (newlines included) a token.
pub fn build_vocab(text: &str, opts: VocabOptions) -> Result<Vocabulary> {
    contract!(!text.is_empty(), "cannot build a vocabulary from empty text");
    let mut counts: HashMap<String, usize> = HashMap::new();
    match opts.mode {
        TokenMode::Word => {
            contract!(opts.max_size >= 2, "word vocabulary needs room for specials");
            for line in text.lines() {
                for tok in word_tokens(line) {
                    let tok = normalize(tok, opts.lowercase);
                    if tok != UNK && tok != EOS {
                        *counts.entry(tok).or_default() += 1;
                    }
                }
            }
        }
        TokenMode::Char => {
            for c in text.chars() {
                *counts.entry(c.to_string()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens = Vec::new();
    let lowercase = opts.mode == TokenMode::Word && opts.lowercase;
    if opts.mode == TokenMode::Word {
        tokens.push(UNK.to_owned());
        tokens.push(EOS.to_owned());
        tokens.extend(ranked.into_iter().take(opts.max_size - 2).map(|(t, _)| t));
    } else {
        tokens.extend(ranked.into_iter().take(opts.max_size).map(|(t, _)| t));
    }
    Vocabulary::from_tokens(opts.mode, lowercase, tokens)
}

/// A corpus as ids over a vocabulary of `vocab_size` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<usize>,
    pub vocab_size: usize,
}

impl TokenStream {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        contract!(
            ids.iter().all(|&i| i < vocab_size),
            "token id out of range for vocabulary of {vocab_size}"
        );
        Ok(TokenStream { ids, vocab_size })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn encode(text: &str, vocab: &Vocabulary) -> Result<TokenStream> {
    let mut ids = Vec::new();
    match vocab.mode {
        TokenMode::Word => {
            let unk = 0;
            let eos = 1;
            for line in text.lines() {
                for tok in word_tokens(line) {
                    let tok = normalize(tok, vocab.lowercase);
                    ids.push(vocab.id(&tok).unwrap_or(unk));
                }
                ids.push(eos);
            }
        }
        TokenMode::Char => {
            let mut buf = [0u8; 4];
            for c in text.chars() {
                let id = vocab
                    .id(c.encode_utf8(&mut buf))
                    .ok_or(Error::UnknownChar(c))?;
                ids.push(id);
            }
        }
    }
    Ok(TokenStream {
        ids,
        vocab_size: vocab.len(),
    })
}

/// Inverse of [`encode`] for in-vocabulary text: word streams come back as
/// space-joined lines, `<eos>` becoming a newline.
pub fn decode(stream: &TokenStream, vocab: &Vocabulary) -> Result<String> {
    contract!(
        stream.vocab_size == vocab.len(),
        "stream over {} tokens decoded with vocabulary of {}",
        stream.vocab_size,
        vocab.len()
    );
    let mut out = String::new();
    match vocab.mode {
        TokenMode::Word => {
            let mut line_start = true;
            for &id in &stream.ids {
                if id == 1 {
                    out.push('\n');
                    line_start = true;
                    continue;
                }
                if !line_start {
                    out.push(' ');
                }
                out.push_str(&vocab.id_to_token[id]);
                line_start = false;
            }
        }
        TokenMode::Char => {
            for &id in &stream.ids {
                out.push_str(&vocab.id_to_token[id]);
            }
        }
    }
    Ok(out)
}

/// One truncated-BPTT window: `inputs[b]` and `targets[b]` each hold
/// `bptt_len` ids of stream `b`, targets shifted one position ahead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Window {
    pub fn batch_size(&self) -> usize {
        self.inputs.len()
    }

    pub fn len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `B` contiguous parallel streams cut into windows of `bptt_len`.
///
/// Window `w` of stream `b` continues exactly where window `w − 1` ended, so
/// recurrent state may be carried across windows. The final partial window
/// is dropped.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub bptt_len: usize,
    pub num_windows: usize,
    streams: Vec<Vec<usize>>,
}

impl BatchPlan {
    pub fn window(&self, w: usize) -> Window {
        assert!(w < self.num_windows, "window {w} out of range");
        let start = w * self.bptt_len;
        let end = start + self.bptt_len;
        Window {
            inputs: self.streams.iter().map(|s| s[start..end].to_vec()).collect(),
            targets: self
                .streams
                .iter()
                .map(|s| s[start + 1..end + 1].to_vec())
                .collect(),
        }
    }

    pub fn windows(&self) -> impl Iterator<Item = Window> + '_ {
        (0..self.num_windows).map(|w| self.window(w))
    }

    pub fn streams(&self) -> &[Vec<usize>] {
        &self.streams
    }

    /// Target tokens covered by all windows.
    pub fn num_targets(&self) -> usize {
        self.batch_size * self.bptt_len * self.num_windows
    }
}

pub fn make_batches(stream: &TokenStream, batch_size: usize, bptt_len: usize) -> Result<BatchPlan> {
    contract!(
        batch_size > 0 && bptt_len > 0,
        "batch size and window length must be positive"
    );
    contract!(
        stream.len() >= batch_size * (bptt_len + 1),
        "stream of {} tokens is too short for {batch_size} streams of window {bptt_len}",
        stream.len()
    );
    let per_stream = stream.len() / batch_size;
    let streams: Vec<Vec<usize>> = stream
        .ids
        .chunks_exact(per_stream)
        .take(batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    Ok(BatchPlan {
        batch_size,
        bptt_len,
        num_windows: (per_stream - 1) / bptt_len,
        streams,
    })
}

/// The `train.txt` / `valid.txt` / `test.txt` triple of a corpus directory.
#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub vocab: Vocabulary,
    pub train: TokenStream,
    pub valid: TokenStream,
    pub test: TokenStream,
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl CorpusSplits {
    /// Vocabulary comes from the training split only.
    pub fn load(dir: &Path, opts: VocabOptions) -> Result<Self> {
        let train_text = read_text(&dir.join("train.txt"))?;
        let valid_text = read_text(&dir.join("valid.txt"))?;
        let test_text = read_text(&dir.join("test.txt"))?;
        let vocab = build_vocab(&train_text, opts)?;
        Ok(CorpusSplits {
            train: encode(&train_text, &vocab)?,
            valid: encode(&valid_text, &vocab)?,
            test: encode(&test_text, &vocab)?,
            vocab,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_vocab_example() {
        let v = build_vocab("a a b\n", VocabOptions::word(10)).unwrap();
        assert_eq!(v.len(), 4);
        for t in ["a", "b", UNK, EOS] {
            assert!(v.id(t).is_some(), "{t}");
        }
        assert_eq!(v.tokens(), &[UNK, EOS, "a", "b"]);
    }

    #[test]
    fn char_vocab_has_no_specials() {
        let v = build_vocab("ab", VocabOptions::char()).unwrap();
        assert_eq!(v.len(), 2);
        assert!(v.id(UNK).is_none());
    }

    #[test]
    fn empty_text_rejected() {
        assert!(build_vocab("", VocabOptions::word(10)).is_err());
    }

    #[test]
    fn truncation_and_tie_break() {
        // c:3, a:2, b:2, d:1 -> keep c, then a before b
        let v = build_vocab("c c c a a b b d\n", VocabOptions::word(4)).unwrap();
        assert_eq!(v.tokens(), &[UNK, EOS, "c", "a"]);
        let s = encode("b d c", &v).unwrap();
        assert_eq!(s.ids, vec![0, 0, 2, 1]);
    }

    #[test]
    fn encode_word_examples() {
        let v = build_vocab("a a b\n", VocabOptions::word(10)).unwrap();
        let s = encode("a b", &v).unwrap();
        assert_eq!(s.ids, vec![v.id("a").unwrap(), v.id("b").unwrap(), 1]);
        let s = encode("zebra", &v).unwrap();
        assert_eq!(s.ids[0], v.id(UNK).unwrap());
    }

    #[test]
    fn lowercase_option() {
        let mut opts = VocabOptions::word(10);
        opts.lowercase = true;
        let v = build_vocab("The the\n", opts).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(encode("THE", &v).unwrap().ids, vec![2, 1]);
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn unknown_char_is_named() {
        let v = build_vocab("ab", VocabOptions::char()).unwrap();
        match encode("abz", &v) {
            Err(Error::UnknownChar('z')) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn decode_round_trips() {
        let text = "the cat sat\non the mat\n";
        let v = build_vocab(text, VocabOptions::word(100)).unwrap();
        assert_eq!(decode(&encode(text, &v).unwrap(), &v).unwrap(), text);
        let text = "tab\there\nand \\ slash";
        let v = build_vocab(text, VocabOptions::char()).unwrap();
        assert_eq!(decode(&encode(text, &v).unwrap(), &v).unwrap(), text);
    }

    #[test]
    fn char_vocab_serialization_escapes() {
        let v = build_vocab("a\n\\\tb c", VocabOptions::char()).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("mode=char size=7\n"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
    }

    #[test]
    fn batches_example() {
        let s = TokenStream::new((0..10).collect(), 10).unwrap();
        let plan = make_batches(&s, 2, 2).unwrap();
        assert_eq!(plan.streams(), &[vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]]);
        let w = plan.window(0);
        assert_eq!(w.inputs, vec![vec![0, 1], vec![5, 6]]);
        assert_eq!(w.targets, vec![vec![1, 2], vec![6, 7]]);
        assert_eq!(plan.num_windows, 2);
    }

    #[test]
    fn single_stream_is_sequential() {
        let s = TokenStream::new((0..7).collect(), 7).unwrap();
        let plan = make_batches(&s, 1, 3).unwrap();
        let w: Vec<_> = plan.windows().collect();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].inputs, vec![vec![0, 1, 2]]);
        assert_eq!(w[1].inputs, vec![vec![3, 4, 5]]);
        assert_eq!(w[1].targets, vec![vec![4, 5, 6]]);
    }

    #[test]
    fn short_stream_rejected() {
        let s = TokenStream::new((0..5).collect(), 5).unwrap();
        assert!(make_batches(&s, 2, 2).is_err());
    }
}
