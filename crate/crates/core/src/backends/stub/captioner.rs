use rand::seq::IndexedRandom;

use super::keyed_rng;
use super::vocab::{ADJECTIVES, BACKGROUNDS, OBJECTS, SUBJECTS, VERBS, WEATHER};
use crate::backends::{CaptionerBackend, Image};
use crate::model::DecodeConfig;
use crate::Result;

/// Template captioner: fills a 23-word sentence from the image bytes.
#[derive(Debug, Clone)]
pub struct StubCaptioner {
    seed: u64,
}

impl StubCaptioner {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl CaptionerBackend for StubCaptioner {
    fn caption(&self, image: &Image, decode: &DecodeConfig) -> Result<String> {
        let mut rng = keyed_rng(self.seed, &[b"caption", image.as_raw()]);
        let mut pick = |list: &[&'static str]| *list.choose(&mut rng).expect("non-empty list");
        let adj = pick(ADJECTIVES);
        let subject = pick(SUBJECTS);
        let verb = pick(VERBS);
        let obj_adj = pick(ADJECTIVES);
        let object = pick(OBJECTS);
        let mut object2 = pick(OBJECTS);
        while object2 == object {
            object2 = pick(OBJECTS);
        }
        let background = pick(BACKGROUNDS);
        let weather = pick(WEATHER);
        let text = format!(
            "a {adj} {subject} {verb} a {obj_adj} {object} next to a {object2} in the \
             {background} on a {weather} day with trees in the distance"
        );
        let words: Vec<&str> = text.split_whitespace().take(decode.max_words).collect();
        Ok(words.join(" "))
    }
}
