//! Word-level vocabulary over the closed scene grammar plus special,
//! segmentation, and visual token id ranges.
//!
//! Id layout is five contiguous disjoint ranges, in order:
//! text words | specials | SEG_0..SEG_{N-1} | semantic codes | pixel codes.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::shapesworld::{raster::ShapeKind, COLOR_NAMES};

pub const TASK_SENTENCES: [&str; 6] = [
    "Please segment all the positive objects by the following candidate categories.",
    "Please segment the target referred to by the language description.",
    "Please segment the target referred to by the reasoning-based description.",
    "Please segment according to the given visual reference regions.",
    "Please generate an image according to the following description.",
    "Please edit the image according to the following instruction.",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    Pad,
    Bos,
    Eos,
    Sep,
    Img,
    SemBegin,
    PixBegin,
}

const SPECIAL_COUNT: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Text,
    Special,
    Seg(usize),
    Sem(usize),
    Pix(usize),
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    word_ids: BTreeMap<String, usize>,
    pub n_seg: usize,
    pub k_sem: usize,
    pub k_pix: usize,
}

impl Vocabulary {
    pub fn build(n_seg: usize, k_sem: usize, k_pix: usize) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for s in TASK_SENTENCES {
            for w in split_words(s) {
                set.insert(w);
            }
        }
        for c in COLOR_NAMES {
            set.insert(c.to_string());
        }
        for k in ShapeKind::ALL {
            set.insert(k.name().to_string());
        }
        for w in [
            "a", "an", "and", "the", "of", "left", "right", "above", "below", "largest",
            "smallest", "recolor", "remove", "replace", "to", "with", ",", ".",
        ] {
            set.insert(w.to_string());
        }
        let words: Vec<String> = set.into_iter().collect();
        let word_ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self {
            words,
            word_ids,
            n_seg,
            k_sem,
            k_pix,
        }
    }

    pub fn text_range(&self) -> Range<usize> {
        0..self.words.len()
    }

    pub fn special_range(&self) -> Range<usize> {
        let s = self.words.len();
        s..s + SPECIAL_COUNT
    }

    pub fn seg_range(&self) -> Range<usize> {
        let s = self.special_range().end;
        s..s + self.n_seg
    }

    pub fn sem_range(&self) -> Range<usize> {
        let s = self.seg_range().end;
        s..s + self.k_sem
    }

    pub fn pix_range(&self) -> Range<usize> {
        let s = self.sem_range().end;
        s..s + self.k_pix
    }

    pub fn size(&self) -> usize {
        self.pix_range().end
    }

    pub fn special(&self, s: Special) -> usize {
        self.special_range().start
            + match s {
                Special::Pad => 0,
                Special::Bos => 1,
                Special::Eos => 2,
                Special::Sep => 3,
                Special::Img => 4,
                Special::SemBegin => 5,
                Special::PixBegin => 6,
            }
    }

    pub fn seg(&self, j: usize) -> usize {
        assert!(j < self.n_seg);
        self.seg_range().start + j
    }

    pub fn sem_id(&self, code: usize) -> usize {
        assert!(code < self.k_sem);
        self.sem_range().start + code
    }

    pub fn pix_id(&self, code: usize) -> usize {
        assert!(code < self.k_pix);
        self.pix_range().start + code
    }

    pub fn class_of(&self, id: usize) -> TokenClass {
        if self.text_range().contains(&id) {
            TokenClass::Text
        } else if self.special_range().contains(&id) {
            TokenClass::Special
        } else if self.seg_range().contains(&id) {
            TokenClass::Seg(id - self.seg_range().start)
        } else if self.sem_range().contains(&id) {
            TokenClass::Sem(id - self.sem_range().start)
        } else if self.pix_range().contains(&id) {
            TokenClass::Pix(id - self.pix_range().start)
        } else {
            panic!("token id {id} out of vocabulary")
        }
    }

    pub fn word_id(&self, w: &str) -> Option<usize> {
        self.word_ids.get(w).copied()
    }

    pub fn word_of(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    /// Word-level tokenization; unknown words are an error naming the word.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, String> {
        let mut out = Vec::new();
        for w in split_words(text) {
            match self.word_ids.get(&w) {
                Some(&id) => out.push(id),
                None => return Err(w),
            }
        }
        Ok(out)
    }
}

/// Lowercase, split on whitespace, and peel trailing `.`/`,` into their own
/// tokens.
fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut w = raw.to_lowercase();
        let mut tail = Vec::new();
        while w.ends_with('.') || w.ends_with(',') {
            tail.push(w.pop().unwrap().to_string());
        }
        if !w.is_empty() {
            out.push(w);
        }
        for t in tail.into_iter().rev() {
            out.push(t);
        }
    }
    out
}
