//! Binary payloads stored in container records.

use std::collections::BTreeMap;

use crate::attention::RegionSet;
use crate::mdan::Modality;
use crate::tensor::Tensor;
use crate::text::TokenSequence;

use super::{MatchingItem, PlantedObject, SyntheticScene, VqaItem};

pub(crate) const KIND_VQA: u8 = 1;
pub(crate) const KIND_MATCHING: u8 = 2;
pub(crate) const KIND_EMBEDDING: u8 = 3;

/// A stored joint-space vector for one image or caption.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: u64,
    pub modality: Modality,
    pub vector: Vec<f64>,
}

pub(crate) struct Writer(Vec<u8>);

impl Writer {
    pub fn new(kind: u8) -> Self {
        Writer(vec![kind])
    }
    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn finish(self) -> Vec<u8> {
        self.0
    }

    fn scene(&mut self, scene: &SyntheticScene) {
        let f = scene.regions.features();
        self.u32(f.rows());
        self.u32(f.cols());
        for &v in f.data() {
            self.f64(v);
        }
        self.f64(scene.noise_sigma);
        self.u32(scene.planted.len());
        for p in &scene.planted {
            self.u32(p.region);
            self.u32(p.concept);
            self.u32(p.attribute);
        }
    }

    fn tokens(&mut self, seq: &TokenSequence) {
        self.u32(seq.len());
        self.u32(seq.valid_len());
        for &id in seq.ids() {
            self.u32(id);
        }
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

pub(crate) type Decoded<T> = std::result::Result<T, String>;

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], kind: u8) -> Decoded<Self> {
        match bytes.first() {
            Some(&k) if k == kind => Ok(Reader { bytes, pos: 1 }),
            Some(&k) => Err(format!("record kind {k}, expected {kind}")),
            None => Err("empty record".into()),
        }
    }

    fn take(&mut self, n: usize) -> Decoded<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| "unexpected end of record".to_string())?;
        self.pos += n;
        Ok(out)
    }
    pub fn u8(&mut self) -> Decoded<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Decoded<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")) as usize)
    }
    pub fn u64(&mut self) -> Decoded<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
    pub fn f64(&mut self) -> Decoded<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
    /// Guards allocations against corrupted counts.
    fn count(&mut self, elem_size: usize) -> Decoded<usize> {
        let n = self.u32()?;
        if n.saturating_mul(elem_size) > self.bytes.len() - self.pos {
            return Err(format!("count {n} exceeds the record size"));
        }
        Ok(n)
    }
    pub fn finish(self) -> Decoded<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(format!("{} unexpected trailing bytes", self.bytes.len() - self.pos))
        }
    }

    fn scene(&mut self) -> Decoded<SyntheticScene> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        if rows.saturating_mul(cols).saturating_mul(8) > self.bytes.len() - self.pos {
            return Err("region block exceeds the record size".into());
        }
        let data = (0..rows * cols).map(|_| self.f64()).collect::<Decoded<Vec<_>>>()?;
        let features = Tensor::new(vec![rows, cols], data).map_err(|e| e.to_string())?;
        let regions = RegionSet::new(features).map_err(|e| e.to_string())?;
        let noise_sigma = self.f64()?;
        let n = self.count(12)?;
        let planted = (0..n)
            .map(|_| {
                Ok(PlantedObject {
                    region: self.u32()?,
                    concept: self.u32()?,
                    attribute: self.u32()?,
                })
            })
            .collect::<Decoded<Vec<_>>>()?;
        if let Some(p) = planted.iter().find(|p| p.region >= rows) {
            return Err(format!("planted region {} outside {rows} regions", p.region));
        }
        Ok(SyntheticScene {
            regions,
            planted,
            noise_sigma,
        })
    }

    fn tokens(&mut self) -> Decoded<TokenSequence> {
        let len = self.u32()?;
        let valid = self.u32()?;
        if len.saturating_mul(4) > self.bytes.len() - self.pos {
            return Err("token block exceeds the record size".into());
        }
        let ids = (0..len).map(|_| self.u32()).collect::<Decoded<Vec<_>>>()?;
        TokenSequence::new(ids, valid).map_err(|e| e.to_string())
    }
}

pub(crate) fn encode_vqa(item: &VqaItem) -> Vec<u8> {
    let mut w = Writer::new(KIND_VQA);
    w.u64(item.id);
    w.scene(&item.scene);
    w.tokens(&item.question);
    w.u32(item.answer);
    w.u32(item.planted_region);
    w.u32(item.keyword_position);
    match &item.label_counts {
        None => w.u8(0),
        Some(counts) => {
            w.u8(1);
            w.u32(counts.len());
            for (&answer, &count) in counts {
                w.u32(answer);
                w.u32(count as usize);
            }
        }
    }
    w.finish()
}

pub(crate) fn decode_vqa(bytes: &[u8]) -> Decoded<VqaItem> {
    let mut r = Reader::new(bytes, KIND_VQA)?;
    let id = r.u64()?;
    let scene = r.scene()?;
    let question = r.tokens()?;
    let answer = r.u32()?;
    let planted_region = r.u32()?;
    let keyword_position = r.u32()?;
    let label_counts = match r.u8()? {
        0 => None,
        1 => {
            let n = r.count(8)?;
            let mut counts = BTreeMap::new();
            for _ in 0..n {
                let answer = r.u32()?;
                counts.insert(answer, r.u32()? as u32);
            }
            Some(counts)
        }
        flag => return Err(format!("invalid label-count flag {flag}")),
    };
    r.finish()?;
    Ok(VqaItem {
        id,
        scene,
        question,
        answer,
        planted_region,
        keyword_position,
        label_counts,
    })
}

pub(crate) fn encode_matching(item: &MatchingItem) -> Vec<u8> {
    let mut w = Writer::new(KIND_MATCHING);
    w.u64(item.id);
    w.scene(&item.scene);
    w.tokens(&item.caption);
    w.finish()
}

pub(crate) fn decode_matching(bytes: &[u8]) -> Decoded<MatchingItem> {
    let mut r = Reader::new(bytes, KIND_MATCHING)?;
    let item = MatchingItem {
        id: r.u64()?,
        scene: r.scene()?,
        caption: r.tokens()?,
    };
    r.finish()?;
    Ok(item)
}

pub(crate) fn encode_embedding(rec: &EmbeddingRecord) -> Vec<u8> {
    let mut w = Writer::new(KIND_EMBEDDING);
    w.u64(rec.id);
    w.u8(match rec.modality {
        Modality::Image => 0,
        Modality::Text => 1,
    });
    w.u32(rec.vector.len());
    for &v in &rec.vector {
        w.f64(v);
    }
    w.finish()
}

pub(crate) fn decode_embedding(bytes: &[u8]) -> Decoded<EmbeddingRecord> {
    let mut r = Reader::new(bytes, KIND_EMBEDDING)?;
    let id = r.u64()?;
    let modality = match r.u8()? {
        0 => Modality::Image,
        1 => Modality::Text,
        m => return Err(format!("invalid modality tag {m}")),
    };
    let n = r.count(8)?;
    let vector = (0..n).map(|_| r.f64()).collect::<Decoded<Vec<_>>>()?;
    r.finish()?;
    Ok(EmbeddingRecord {
        id,
        modality,
        vector,
    })
}
