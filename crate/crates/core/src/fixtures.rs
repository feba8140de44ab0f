//! A small labelled image suite matching the stub world, for demos and
//! tests: image `i` is a noisy copy of the prototype of class `i mod 10`.

use std::path::Path;

use rand::Rng;

use crate::backends::stub::{class_prototype, FIXTURE_LABELS, WORLD_SEED};
use crate::backends::{save_image, unit_to_image, Image};
use crate::model::TestSuite;
use crate::{Error, Result};

/// Side length of fixture images in pixels.
pub const FIXTURE_SIZE: u32 = 16;

/// Largest per-value deviation from the class prototype.
const JITTER: f64 = 0.1;

pub fn fixture_image(index: usize, size: u32) -> Result<Image> {
    let class = index % FIXTURE_LABELS.len();
    let n = (size * size * 3) as usize;
    let mut rng = crate::backends::stub::keyed_rng(WORLD_SEED, &[b"fixture", &(index as u64).to_le_bytes()]);
    let data: Vec<f64> = class_prototype(class, n)
        .into_iter()
        .map(|v| v + rng.random_range(-JITTER..JITTER))
        .collect();
    unit_to_image(size, size, &data)
}

/// Writes `count` PNGs and a `labels.csv` into `dir` and loads the suite.
pub fn write_fixture_suite(dir: &Path, count: usize) -> Result<TestSuite> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    let row = |csv: &mut csv::Writer<Vec<u8>>, r: [&str; 3]| {
        csv.write_record(r).map_err(|e| Error::InvalidArgument(e.to_string()))
    };
    row(&mut csv, ["path", "label_id", "label_text"])?;
    for i in 0..count {
        let name = format!("img{i:02}.png");
        save_image(&dir.join(&name), &fixture_image(i, FIXTURE_SIZE)?)?;
        let class = i % FIXTURE_LABELS.len();
        row(&mut csv, [&name, &class.to_string(), FIXTURE_LABELS[class]])?;
    }
    let bytes = csv.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let labels = dir.join("labels.csv");
    std::fs::write(&labels, bytes).map_err(|e| Error::io(labels, e))?;
    TestSuite::load_dir(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::stub::StubClassifier;
    use crate::backends::ClassifierBackend;
    use crate::evaluation::ranking;

    #[test]
    fn fixtures_are_classified_correctly() {
        let c = StubClassifier::new();
        for i in 0..10 {
            let p = c.predict(&fixture_image(i, FIXTURE_SIZE).unwrap()).unwrap();
            assert_eq!(ranking(&p)[0], i % 10, "image {i}: {p:?}");
        }
    }

    #[test]
    fn suite_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let suite = write_fixture_suite(dir.path(), 3).unwrap();
        assert_eq!(suite.len(), 3);
        assert_eq!(suite.samples[2].label_text, FIXTURE_LABELS[2]);
        assert_eq!(suite.samples[0].id, "img00");
    }
}
