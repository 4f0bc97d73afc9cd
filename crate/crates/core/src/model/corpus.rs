use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{flatten_prefix, synthetic, unflatten_prefix, ScaleSchedule, TokenId, TokenMap, Tokenizer};

/// One encoded training sequence `(c, r_1..r_K)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusItem {
    pub condition: u32,
    pub maps: Vec<TokenMap>,
}

/// Encoded token-map sequences with their class labels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    condition: u32,
    tokens: String,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Encodes `size` seeded bump images; item `i` has class `i mod classes`
    /// and its image is drawn from the stream derived from `(seed, i)`.
    pub fn synthetic(tokenizer: &Tokenizer, classes: usize, size: usize, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidInput("corpus needs at least one class".into()));
        }
        let (h, w) = tokenizer.schedule.finest();
        let items = (0..size)
            .map(|i| {
                let class = (i % classes) as u32;
                let mut rng = crate::seed::derived_rng(seed, &[i as u64]);
                let image = synthetic::bump_image(h, w, tokenizer.dim(), class, classes, &mut rng);
                Ok(CorpusItem {
                    condition: class,
                    maps: tokenizer.encode(&image)?.maps,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { items })
    }

    /// Checks every sequence against the schedule and vocabulary.
    pub fn validate(&self, schedule: &ScaleSchedule, vocab: usize, classes: usize) -> Result<()> {
        for (i, item) in self.items.iter().enumerate() {
            if item.condition as usize >= classes {
                return Err(Error::InvalidInput(format!(
                    "corpus item {i} has class {} but the model has {classes}",
                    item.condition
                )));
            }
            if item.maps.len() != schedule.len() {
                return Err(Error::ShapeMismatch(format!(
                    "corpus item {i} has {} maps, schedule has {} scales",
                    item.maps.len(),
                    schedule.len()
                )));
            }
            for map in &item.maps {
                map.validate(schedule, vocab)?;
            }
        }
        Ok(())
    }

    /// CSV with columns `condition,tokens`; `tokens` is the flattened
    /// sequence, space separated, coarse to fine, row-major within a scale.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for item in &self.items {
            let tokens = flatten_prefix(&item.maps)
                .iter()
                .map(|id| id.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            out.serialize(Record {
                condition: item.condition,
                tokens,
            })?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, schedule: &ScaleSchedule) -> Result<Self> {
        let mut input = csv::Reader::from_reader(reader);
        let mut items = Vec::new();
        for (row, record) in input.deserialize::<Record>().enumerate() {
            let record = record?;
            let ids = record
                .tokens
                .split_whitespace()
                .map(|t| {
                    t.parse::<TokenId>()
                        .map_err(|_| Error::InvalidInput(format!("corpus row {row}: bad token '{t}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            if ids.len() != schedule.total_sites() {
                return Err(Error::ShapeMismatch(format!(
                    "corpus row {row} has {} tokens, schedule needs {}",
                    ids.len(),
                    schedule.total_sites()
                )));
            }
            items.push(CorpusItem {
                condition: record.condition,
                maps: unflatten_prefix(schedule, &ids)?,
            });
        }
        Ok(Self { items })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{Codebook, CodebookSpec, Decoder};

    fn tokenizer() -> Tokenizer {
        let schedule = ScaleSchedule::new(vec![(1, 1), (2, 2)]).unwrap();
        Tokenizer::new(schedule, Codebook::seeded(2, 4, 2, &CodebookSpec::default()).unwrap(), Decoder::Identity).unwrap()
    }

    #[test]
    fn synthetic_corpus_is_reproducible_and_valid() {
        let t = tokenizer();
        let a = Corpus::synthetic(&t, 2, 10, 5).unwrap();
        let b = Corpus::synthetic(&t, 2, 10, 5).unwrap();
        assert_eq!(a, b);
        a.validate(&t.schedule, 4, 2).unwrap();
        assert_eq!(a.items[3].condition, 1);
    }

    #[test]
    fn csv_round_trip() {
        let t = tokenizer();
        let corpus = Corpus::synthetic(&t, 3, 7, 1).unwrap();
        let mut buf = Vec::new();
        corpus.write_csv(&mut buf).unwrap();
        let back = Corpus::read_csv(buf.as_slice(), &t.schedule).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn short_rows_are_rejected() {
        let t = tokenizer();
        let text = "condition,tokens\n0,1 2\n";
        assert!(Corpus::read_csv(text.as_bytes(), &t.schedule).is_err());
    }
}
