use std::collections::BTreeSet;
use std::ops::Range;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::merkle::{self, Hash};
use super::{ProvenanceError, SessionTranscript, Stream, CHUNK_SIZE, DEFAULT_MAX_TRANSCRIPT, SALT_LEN};
use crate::crypto::{sign, verify_signature, SecureRng, Signature, SigningPublicKey, SigningSecret};
use crate::wire::{b64_decode, b64_encode, Reader, WireError, Writer};

const SIGNING_DOMAIN: &[u8] = b"veil/notary/commitment/v1";
const PROOF_VERSION: u8 = 1;

/// What the notary signs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCommitment {
    pub chunk_size: u32,
    pub request_len: u64,
    pub response_len: u64,
    #[serde(with = "crate::wire::b64_array")]
    pub root_request: Hash,
    #[serde(with = "crate::wire::b64_array")]
    pub root_response: Hash,
    pub server_name: String,
    pub timestamp: u64,
    pub notary_signature: Signature,
}

/// Per-chunk salts, kept by the prover.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptSalts {
    pub request: Vec<[u8; SALT_LEN]>,
    pub response: Vec<[u8; SALT_LEN]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notarization {
    pub commitment: SessionCommitment,
    pub salts: TranscriptSalts,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevealedChunk {
    pub stream: Stream,
    pub index: u32,
    pub bytes: Vec<u8>,
    pub salt: [u8; SALT_LEN],
    pub path: Vec<Hash>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RedactedProof {
    pub commitment: SessionCommitment,
    pub revealed: Vec<RevealedChunk>,
    pub redacted: Vec<(Stream, u32)>,
}

/// Byte ranges the prover wants to disclose, per stream.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RevealRanges {
    pub request: Vec<Range<usize>>,
    pub response: Vec<Range<usize>>,
}

/// The verifier's view: disclosed bytes with their offsets, merged into
/// contiguous segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevealedView {
    pub request_len: usize,
    pub response_len: usize,
    pub request: Vec<(usize, Vec<u8>)>,
    pub response: Vec<(usize, Vec<u8>)>,
}

impl RevealRanges {
    pub fn everything(t: &SessionTranscript) -> Self {
        Self {
            request: vec![0..t.request.len()],
            response: vec![0..t.response.len()],
        }
    }

    fn for_stream(&self, s: Stream) -> &[Range<usize>] {
        match s {
            Stream::Request => &self.request,
            Stream::Response => &self.response,
        }
    }
}

impl RevealedView {
    pub fn segments(&self, s: Stream) -> &[(usize, Vec<u8>)] {
        match s {
            Stream::Request => &self.request,
            Stream::Response => &self.response,
        }
    }

    pub fn stream_len(&self, s: Stream) -> usize {
        match s {
            Stream::Request => self.request_len,
            Stream::Response => self.response_len,
        }
    }

    /// The stream with hidden bytes as `None`.
    pub fn masked(&self, s: Stream) -> Vec<Option<u8>> {
        let mut out = vec![None; self.stream_len(s)];
        for (offset, bytes) in self.segments(s) {
            for (i, b) in bytes.iter().enumerate() {
                out[offset + i] = Some(*b);
            }
        }
        out
    }
}

fn chunk_count(len: usize) -> usize {
    len.div_ceil(CHUNK_SIZE)
}

fn chunk_range(index: usize, len: usize) -> Range<usize> {
    let start = index * CHUNK_SIZE;
    start..(start + CHUNK_SIZE).min(len)
}

fn leaves(data: &[u8], salts: &[[u8; SALT_LEN]]) -> Vec<Hash> {
    data.chunks(CHUNK_SIZE)
        .zip(salts)
        .map(|(c, s)| merkle::leaf_hash(s, c))
        .collect()
}

fn signed_bytes(c: &SessionCommitment) -> Vec<u8> {
    Writer::new()
        .field(SIGNING_DOMAIN)
        .u32(c.chunk_size)
        .u64(c.request_len)
        .u64(c.response_len)
        .field(&c.root_request)
        .field(&c.root_response)
        .field(c.server_name.as_bytes())
        .u64(c.timestamp)
        .finish()
}

/// Commits to a transcript. The salts go back to the prover; the notary keeps
/// nothing.
pub fn notarize(
    transcript: &SessionTranscript,
    notary_key: &SigningSecret,
    max_len: usize,
    rng: &mut impl SecureRng,
) -> Result<Notarization, ProvenanceError> {
    let total = transcript.request.len() + transcript.response.len();
    if total > max_len {
        return Err(ProvenanceError::TooLarge(total, max_len));
    }
    if transcript.request.is_empty() {
        return Err(ProvenanceError::EmptyStream(Stream::Request));
    }
    if transcript.response.is_empty() {
        return Err(ProvenanceError::EmptyStream(Stream::Response));
    }
    let mut fresh = |n: usize| {
        (0..n)
            .map(|_| {
                let mut s = [0u8; SALT_LEN];
                rng.fill_bytes(&mut s);
                s
            })
            .collect::<Vec<_>>()
    };
    let salts = TranscriptSalts {
        request: fresh(chunk_count(transcript.request.len())),
        response: fresh(chunk_count(transcript.response.len())),
    };
    let mut commitment = SessionCommitment {
        chunk_size: CHUNK_SIZE as u32,
        request_len: transcript.request.len() as u64,
        response_len: transcript.response.len() as u64,
        root_request: merkle::root(&leaves(&transcript.request, &salts.request)),
        root_response: merkle::root(&leaves(&transcript.response, &salts.response)),
        server_name: transcript.server_name.clone(),
        timestamp: transcript.timestamp,
        notary_signature: Signature([0; 64]),
    };
    commitment.notary_signature = sign(&signed_bytes(&commitment), notary_key);
    Ok(Notarization { commitment, salts })
}

/// Opens every chunk that overlaps a requested range; everything else is
/// listed as redacted.
pub fn build_proof(
    transcript: &SessionTranscript,
    salts: &TranscriptSalts,
    commitment: &SessionCommitment,
    reveal: &RevealRanges,
) -> Result<RedactedProof, ProvenanceError> {
    let mut revealed = Vec::new();
    let mut redacted = Vec::new();
    for (stream, data, stream_salts, root) in [
        (Stream::Request, &transcript.request, &salts.request, commitment.root_request),
        (Stream::Response, &transcript.response, &salts.response, commitment.root_response),
    ] {
        let n = chunk_count(data.len());
        if stream_salts.len() != n {
            return Err(ProvenanceError::CommitmentMismatch);
        }
        let leaf_hashes = leaves(data, stream_salts);
        if merkle::root(&leaf_hashes) != root {
            return Err(ProvenanceError::CommitmentMismatch);
        }
        let mut open = BTreeSet::new();
        for r in reveal.for_stream(stream) {
            if r.start > r.end || r.end > data.len() {
                return Err(ProvenanceError::RangeOutOfBounds {
                    stream,
                    start: r.start,
                    end: r.end,
                    len: data.len(),
                });
            }
            if r.is_empty() {
                continue;
            }
            open.extend(r.start / CHUNK_SIZE..=(r.end - 1) / CHUNK_SIZE);
        }
        for i in 0..n {
            if open.contains(&i) {
                revealed.push(RevealedChunk {
                    stream,
                    index: i as u32,
                    bytes: data[chunk_range(i, data.len())].to_vec(),
                    salt: stream_salts[i],
                    path: merkle::path(i, &leaf_hashes),
                });
            } else {
                redacted.push((stream, i as u32));
            }
        }
    }
    Ok(RedactedProof {
        commitment: commitment.clone(),
        revealed,
        redacted,
    })
}

pub fn verify_proof(proof: &RedactedProof, notary: &SigningPublicKey) -> Result<RevealedView, ProvenanceError> {
    let c = &proof.commitment;
    if !verify_signature(&signed_bytes(c), &c.notary_signature.0, notary) {
        return Err(ProvenanceError::BadSignature);
    }
    if c.chunk_size as usize != CHUNK_SIZE {
        return Err(ProvenanceError::Malformed(format!("chunk size {}", c.chunk_size)));
    }
    let request_len = usize::try_from(c.request_len).map_err(|_| ProvenanceError::Malformed("length".into()))?;
    let response_len = usize::try_from(c.response_len).map_err(|_| ProvenanceError::Malformed("length".into()))?;

    let mut seen = BTreeSet::new();
    for entry in proof
        .revealed
        .iter()
        .map(|r| (r.stream, r.index))
        .chain(proof.redacted.iter().copied())
    {
        if !seen.insert(entry) {
            return Err(ProvenanceError::Malformed(format!("chunk {entry:?} listed twice")));
        }
    }
    let expected = chunk_count(request_len) + chunk_count(response_len);
    let in_range = seen.iter().all(|(s, i)| {
        let len = if *s == Stream::Request { request_len } else { response_len };
        (*i as usize) < chunk_count(len)
    });
    if seen.len() != expected || !in_range {
        return Err(ProvenanceError::Malformed("chunk coverage incomplete".into()));
    }

    let mut view = RevealedView {
        request_len,
        response_len,
        request: Vec::new(),
        response: Vec::new(),
    };
    let mut chunks: Vec<&RevealedChunk> = proof.revealed.iter().collect();
    chunks.sort_by_key(|r| (r.stream, r.index));
    for chunk in chunks {
        let (len, root) = match chunk.stream {
            Stream::Request => (request_len, c.root_request),
            Stream::Response => (response_len, c.root_response),
        };
        let index = chunk.index as usize;
        if chunk.bytes.len() != chunk_range(index, len).len() {
            return Err(ProvenanceError::BadPath);
        }
        let leaf = merkle::leaf_hash(&chunk.salt, &chunk.bytes);
        if merkle::root_from_path(index, chunk_count(len), leaf, &chunk.path) != Some(root) {
            return Err(ProvenanceError::BadPath);
        }
        let segments = match chunk.stream {
            Stream::Request => &mut view.request,
            Stream::Response => &mut view.response,
        };
        let offset = index * CHUNK_SIZE;
        match segments.last_mut() {
            Some((start, bytes)) if *start + bytes.len() == offset => bytes.extend_from_slice(&chunk.bytes),
            _ => segments.push((offset, chunk.bytes.clone())),
        }
    }
    Ok(view)
}

impl RedactedProof {
    /// Canonical length-prefixed binary encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.commitment;
        let mut w = Writer::new();
        w.u8(PROOF_VERSION)
            .u32(c.chunk_size)
            .u64(c.request_len)
            .u64(c.response_len)
            .field(&c.root_request)
            .field(&c.root_response)
            .field(c.server_name.as_bytes())
            .u64(c.timestamp)
            .field(&c.notary_signature.0)
            .u32(self.revealed.len() as u32);
        for r in &self.revealed {
            w.u8(r.stream.tag())
                .u32(r.index)
                .field(&r.bytes)
                .field(&r.salt)
                .u32(r.path.len() as u32);
            for h in &r.path {
                w.field(h);
            }
        }
        w.u32(self.redacted.len() as u32);
        for (s, i) in &self.redacted {
            w.u8(s.tag()).u32(*i);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProvenanceError> {
        let mut r = Reader::new(bytes);
        let version = r.u8()?;
        if version != PROOF_VERSION {
            return Err(WireError::BadValue("proof version").into());
        }
        let chunk_size = r.u32()?;
        let request_len = r.u64()?;
        let response_len = r.u64()?;
        let root_request = r.fixed::<32>("root_request")?;
        let root_response = r.fixed::<32>("root_response")?;
        let server_name = String::from_utf8(r.field()?.to_vec()).map_err(|_| WireError::BadValue("server_name"))?;
        let timestamp = r.u64()?;
        let notary_signature = Signature(r.fixed::<64>("notary_signature")?);
        // counts are bounded by the input length so hostile values cannot force
        // huge allocations
        let n_revealed = r.u32()? as usize;
        let mut revealed = Vec::with_capacity(n_revealed.min(bytes.len()));
        for _ in 0..n_revealed {
            let stream = Stream::from_tag(r.u8()?)?;
            let index = r.u32()?;
            let chunk = r.field()?.to_vec();
            let salt = r.fixed::<SALT_LEN>("salt")?;
            let n_path = r.u32()? as usize;
            let mut path = Vec::with_capacity(n_path.min(64));
            for _ in 0..n_path {
                path.push(r.fixed::<32>("path")?);
            }
            revealed.push(RevealedChunk {
                stream,
                index,
                bytes: chunk,
                salt,
                path,
            });
        }
        let n_redacted = r.u32()? as usize;
        let mut redacted = Vec::with_capacity(n_redacted.min(bytes.len()));
        for _ in 0..n_redacted {
            let stream = Stream::from_tag(r.u8()?)?;
            redacted.push((stream, r.u32()?));
        }
        r.finish()?;
        Ok(Self {
            commitment: SessionCommitment {
                chunk_size,
                request_len,
                response_len,
                root_request,
                root_response,
                server_name,
                timestamp,
                notary_signature,
            },
            revealed,
            redacted,
        })
    }
}

impl Serialize for RedactedProof {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&b64_encode(&self.to_bytes()))
    }
}

impl<'de> Deserialize<'de> for RedactedProof {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = b64_decode(&text).map_err(serde::de::Error::custom)?;
        Self::from_bytes(&bytes).map_err(serde::de::Error::custom)
    }
}

/// Anything that can notarize a transcript: an in-process key or a remote
/// notary service.
pub trait Notary: Send + Sync {
    fn notarize(&self, transcript: &SessionTranscript) -> Result<Notarization, ProvenanceError>;
    fn public_key(&self) -> SigningPublicKey;
}

/// A notary holding its key in memory; the key is used behind a lock.
pub struct LocalNotary {
    key: SigningSecret,
    public: SigningPublicKey,
    max_len: usize,
    rng: Mutex<ChaCha20Rng>,
}

impl LocalNotary {
    pub fn new(key: SigningSecret, seed: Option<u64>) -> Self {
        let rng = match seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        Self {
            public: key.public_key(),
            key,
            max_len: DEFAULT_MAX_TRANSCRIPT,
            rng: Mutex::new(rng),
        }
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }
}

impl Notary for LocalNotary {
    fn notarize(&self, transcript: &SessionTranscript) -> Result<Notarization, ProvenanceError> {
        let mut rng = self.rng.lock().expect("notary lock poisoned");
        notarize(transcript, &self.key, self.max_len, &mut *rng)
    }

    fn public_key(&self) -> SigningPublicKey {
        self.public.clone()
    }
}
