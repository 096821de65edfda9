//! Byte-level BPE compatible with GPT-2 `vocab.json` / `merges.txt`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};

pub type TokenId = u32;

const GPT2_SPLIT: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// The 256-entry byte → printable-char table used by GPT-2 vocab files.
pub fn byte_encoder() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        table[b as usize] = if printable {
            char::from(b)
        } else {
            let c = char::from_u32(256 + extra).expect("valid scalar");
            extra += 1;
            c
        };
    }
    table
}

#[derive(Clone, Debug)]
pub struct BpeVocab {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    /// Merge rules in rank order, as token-id pairs.
    merges: Vec<(TokenId, TokenId)>,
    merge_lookup: HashMap<(TokenId, TokenId), (usize, TokenId)>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    byte_ids: [TokenId; 256],
    special_tokens: BTreeMap<String, TokenId>,
    splitter: Regex,
}

impl BpeVocab {
    pub fn load(vocab_path: impl AsRef<Path>, merges_path: impl AsRef<Path>) -> Result<Self> {
        let vocab_path = vocab_path.as_ref();
        let merges_path = merges_path.as_ref();
        let vocab_text =
            fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let merges_text =
            fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let token_to_id: HashMap<String, TokenId> =
            serde_json::from_str(&vocab_text).map_err(|e| Error::Parse {
                file: vocab_path.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            })?;
        let merges = parse_merges(&merges_text, &merges_path.display().to_string())?;
        Self::from_parts(token_to_id, merges)
    }

    /// Builds a vocab from an in-memory token map and ordered merge pairs.
    pub fn from_parts(
        token_to_id: HashMap<String, TokenId>,
        merges: Vec<(String, String)>,
    ) -> Result<Self> {
        let n = token_to_id.len();
        let mut id_to_token = vec![None::<String>; n];
        for (tok, &id) in &token_to_id {
            let slot = id_to_token.get_mut(id as usize).ok_or_else(|| {
                Error::Validation(format!(
                    "token {tok:?} has id {id}, outside the dense range 0..{n}"
                ))
            })?;
            if let Some(prev) = slot {
                return Err(Error::Validation(format!(
                    "duplicate id {id} for tokens {prev:?} and {tok:?}"
                )));
            }
            *slot = Some(tok.clone());
        }
        let id_to_token: Vec<String> = id_to_token.into_iter().map(Option::unwrap).collect();

        let byte_encoder = byte_encoder();
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        let mut byte_ids = [0; 256];
        for (b, c) in byte_encoder.iter().enumerate() {
            byte_ids[b] = *token_to_id.get(&c.to_string()).ok_or_else(|| {
                Error::Validation(format!("vocab lacks the byte token {c:?} for byte {b}"))
            })?;
        }

        let mut rules = Vec::with_capacity(merges.len());
        let mut merge_lookup = HashMap::with_capacity(merges.len());
        for (rank, (left, right)) in merges.iter().enumerate() {
            let lookup = |t: &str| {
                token_to_id.get(t).copied().ok_or_else(|| {
                    Error::Validation(format!(
                        "merge rule {} `{left} {right}` references unknown token {t:?}",
                        rank + 1
                    ))
                })
            };
            let l = lookup(left)?;
            let r = lookup(right)?;
            let merged = lookup(&format!("{left}{right}"))?;
            rules.push((l, r));
            merge_lookup.entry((l, r)).or_insert((rank, merged));
        }

        let special_tokens = token_to_id
            .iter()
            .filter(|(t, _)| t.starts_with("<|") && t.ends_with("|>"))
            .map(|(t, &id)| (t.clone(), id))
            .collect();

        Ok(Self {
            token_to_id,
            id_to_token,
            merges: rules,
            merge_lookup,
            byte_encoder,
            byte_decoder,
            byte_ids,
            special_tokens,
            splitter: Regex::new(GPT2_SPLIT).expect("static pattern"),
        })
    }

    /// A vocab of the 256 byte tokens only, with no merges.
    pub fn bytes_only() -> Self {
        let token_to_id = byte_encoder()
            .iter()
            .enumerate()
            .map(|(b, c)| (c.to_string(), b as TokenId))
            .collect();
        Self::from_parts(token_to_id, Vec::new()).expect("byte vocab is valid")
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn n_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn special_tokens(&self) -> &BTreeMap<String, TokenId> {
        &self.special_tokens
    }

    /// `<|endoftext|>` doubles as BOS/EOS/pad for GPT-2 style vocabs.
    pub fn bos_id(&self) -> Option<TokenId> {
        self.special_tokens.get("<|endoftext|>").copied()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for piece in self.splitter.find_iter(text) {
            // the pattern has no catastrophic backtracking; a match error would
            // only come from the backtrack limit
            let piece = piece.expect("pre-tokenizer regex failed");
            self.encode_piece(piece.as_str().as_bytes(), &mut out);
        }
        out
    }

    fn encode_piece(&self, bytes: &[u8], out: &mut Vec<TokenId>) {
        let mut word: Vec<TokenId> = bytes.iter().map(|&b| self.byte_ids[b as usize]).collect();
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|w| self.merge_lookup.get(&(w[0], w[1])))
                .min_by_key(|(rank, _)| *rank);
            let Some(&(rank, merged)) = best else { break };
            let pair = self.merges[rank];
            let mut next = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(word[i]);
                    i += 1;
                }
            }
            word = next;
        }
        out.extend(word);
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or_else(|| {
                Error::Validation(format!(
                    "token id {id} out of range for vocab of {}",
                    self.vocab_size()
                ))
            })?;
            for c in tok.chars() {
                match self.byte_decoder.get(&c) {
                    Some(&b) => bytes.push(b),
                    // special tokens may contain chars outside the byte table
                    None => {
                        let mut buf = [0u8; 4];
                        bytes.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
        }
        Ok(bytes)
    }

    /// Inverse of [`encode`](Self::encode). Sequences that split a UTF-8
    /// character are decoded lossily.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn byte_symbol(&self, b: u8) -> char {
        self.byte_encoder[b as usize]
    }
}

fn parse_merges(text: &str, file: &str) -> Result<Vec<(String, String)>> {
    let mut merges = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if idx == 0 && line.starts_with("#version") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                merges.push((a.to_string(), b.to_string()))
            }
            _ => {
                return Err(Error::Parse {
                    file: file.to_string(),
                    line: line_no,
                    message: format!("expected two space-separated tokens, got {line:?}"),
                })
            }
        }
    }
    Ok(merges)
}

/// Tokenizers usable by the capture pipeline.
#[derive(Clone, Debug)]
pub enum Tokenizer {
    Bpe(Box<BpeVocab>),
    /// Each UTF-8 byte is its own token id; for synthetic models with a
    /// vocab of at least 256 entries.
    Bytes,
}

impl Tokenizer {
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        match self {
            Tokenizer::Bpe(v) => v.encode(text),
            Tokenizer::Bytes => text.bytes().map(TokenId::from).collect(),
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        match self {
            Tokenizer::Bpe(v) => v.decode(ids),
            Tokenizer::Bytes => {
                let bytes = ids
                    .iter()
                    .map(|&id| {
                        u8::try_from(id).map_err(|_| {
                            Error::Validation(format!("byte token id {id} exceeds 255"))
                        })
                    })
                    .collect::<Result<Vec<u8>>>()?;
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Bpe(v) => v.vocab_size(),
            Tokenizer::Bytes => 256,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tiny_vocab(extra: &[&str]) -> HashMap<String, TokenId> {
        let mut map: HashMap<String, TokenId> = byte_encoder()
            .iter()
            .enumerate()
            .map(|(b, c)| (c.to_string(), b as TokenId))
            .collect();
        for t in extra {
            let id = map.len() as TokenId;
            map.insert(t.to_string(), id);
        }
        map
    }

    #[test]
    fn byte_encoder_is_bijective() {
        let table = byte_encoder();
        let mut seen: Vec<char> = table.to_vec();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 256);
        assert_eq!(table[b' ' as usize], 'Ġ');
        assert_eq!(table[b'\n' as usize], 'Ċ');
    }

    #[test]
    fn degenerate_byte_vocab_round_trips() {
        let v = BpeVocab::bytes_only();
        assert_eq!(v.vocab_size(), 256);
        assert_eq!(v.n_merges(), 0);
        let ids = v.encode("héllo");
        assert_eq!(ids.len(), "héllo".len());
        assert_eq!(v.decode(&ids).unwrap(), "héllo");
    }

    #[test]
    fn merges_apply_lowest_rank_first() {
        let map = tiny_vocab(&["ab", "bc", "abc"]);
        let merges = vec![
            ("b".to_string(), "c".to_string()),
            ("a".to_string(), "b".to_string()),
            ("a".to_string(), "bc".to_string()),
        ];
        let v = BpeVocab::from_parts(map, merges).unwrap();
        // "b c" outranks "a b", so "abc" becomes a + bc, then abc
        assert_eq!(v.encode("abc"), vec![258]);
        assert_eq!(v.encode("ab"), vec![256]);
    }

    #[test]
    fn unknown_merge_token_is_rejected() {
        let map = tiny_vocab(&[]);
        let err = BpeVocab::from_parts(map, vec![("zz".into(), "q".into())]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut map = tiny_vocab(&[]);
        map.insert("dup".into(), 3);
        let err = BpeVocab::from_parts(map, vec![]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn malformed_merge_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = dir.path().join("vocab.json");
        let merges = dir.path().join("merges.txt");
        fs::write(&vocab, serde_json::to_string(&tiny_vocab(&["ab"])).unwrap()).unwrap();
        let mut f = fs::File::create(&merges).unwrap();
        writeln!(f, "#version: 0.2\na b\nthree part line").unwrap();
        match BpeVocab::load(&vocab, &merges).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_json_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = dir.path().join("vocab.json");
        let merges = dir.path().join("merges.txt");
        fs::write(&vocab, "{\n\"a\": 0,\n\"b\": }").unwrap();
        fs::write(&merges, "#version: 0.2\n").unwrap();
        match BpeVocab::load(&vocab, &merges).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn out_of_range_id_fails_decode() {
        let v = BpeVocab::bytes_only();
        assert!(matches!(v.decode(&[256]), Err(Error::Validation(_))));
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn byte_tokenizer() {
        let t = Tokenizer::Bytes;
        assert_eq!(t.encode("AB"), vec![65, 66]);
        assert_eq!(t.decode(&[65, 66]).unwrap(), "AB");
        assert!(t.decode(&[300]).is_err());
    }
}
