//! Intruder quiz: four crops of one concept plus one crop of another
//! concept of the same class, shuffled. The answer key is kept apart.

use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{crop, to_rgb_image, BBox, Dataset};
use crate::error::{Error, Result};
use crate::explain::Explanation;
use crate::persist;
use crate::seed::rng_for;

pub const MAIN_CROPS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuizCrop {
    pub source_id: String,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuizItem {
    pub class_id: usize,
    pub concept_main: usize,
    pub concept_intruder: usize,
    /// Five crops in presentation order.
    pub crops: Vec<QuizCrop>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntruderQuiz {
    pub seed: u64,
    pub items: Vec<QuizItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerKey {
    /// Position of the intruder crop in each item.
    pub answers: Vec<usize>,
}

/// Candidate `(main, intruder)` pairs of one explanation with the crops to
/// show: the main concept's top four and the intruder's best crop that is
/// not among them.
fn pairs(e: &Explanation) -> Vec<(usize, usize, Vec<QuizCrop>, QuizCrop)> {
    let as_crop =
        |r: &crate::explain::VisualizedCrop| QuizCrop { source_id: r.record.source_id.clone(), bbox: r.record.bbox };
    let mut out = Vec::new();
    for main in &e.visualizations {
        if main.crops.len() < MAIN_CROPS {
            continue;
        }
        let shown: Vec<QuizCrop> = main.crops[..MAIN_CROPS].iter().map(as_crop).collect();
        for intr in &e.visualizations {
            if intr.concept_index == main.concept_index {
                continue;
            }
            if let Some(c) = intr.crops.iter().map(as_crop).find(|c| !shown.contains(c)) {
                out.push((main.concept_index, intr.concept_index, shown.clone(), c));
            }
        }
    }
    out
}

/// Draws `items` quiz entries: a uniformly random class among those with a
/// usable concept pair, then a uniformly random pair, then a random
/// position for the intruder.
pub fn make_intruder_quiz(explanations: &[Explanation], items: usize, seed: u64) -> Result<(IntruderQuiz, AnswerKey)> {
    let usable: Vec<(usize, Vec<_>)> = explanations
        .iter()
        .filter_map(|e| {
            let p = pairs(e);
            if p.is_empty() {
                log::warn!("class {} has no usable concept pair for the quiz", e.class_id);
                None
            } else {
                Some((e.class_id, p))
            }
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Invalid("no class has two concepts with enough crops".into()));
    }
    let mut rng = rng_for(seed, "intruder-quiz");
    let mut quiz = Vec::with_capacity(items);
    let mut answers = Vec::with_capacity(items);
    for _ in 0..items {
        let (class_id, p) = &usable[rng.gen_range(0..usable.len())];
        let (main, intr, shown, odd) = &p[rng.gen_range(0..p.len())];
        let mut crops = shown.clone();
        crops.shuffle(&mut rng);
        let pos = rng.gen_range(0..=MAIN_CROPS);
        crops.insert(pos, odd.clone());
        quiz.push(QuizItem { class_id: *class_id, concept_main: *main, concept_intruder: *intr, crops });
        answers.push(pos);
    }
    Ok((IntruderQuiz { seed, items: quiz }, AnswerKey { answers }))
}

/// Writes `quiz.json`, `answers.json` and one PNG strip per item.
pub fn save_quiz(dir: &Path, quiz: &IntruderQuiz, key: &AnswerKey, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir.join("items"))?;
    persist::write_json(&dir.join("quiz.json"), quiz)?;
    persist::write_json(&dir.join("answers.json"), key)?;
    for (i, item) in quiz.items.iter().enumerate() {
        let tiles = item
            .crops
            .iter()
            .map(|c| {
                let src = dataset
                    .get(&c.source_id)
                    .ok_or_else(|| Error::Invalid(format!("unknown crop source `{}`", c.source_id)))?;
                Ok(to_rgb_image(crop(src.pixels.view(), c.bbox).view()))
            })
            .collect::<Result<Vec<_>>>()?;
        let side = tiles.iter().map(|t| t.height()).max().unwrap_or(0);
        let gap = 2;
        let width: u32 = tiles.iter().map(|t| t.width() + gap).sum();
        let mut strip = RgbImage::from_pixel(width, side, image::Rgb([255, 255, 255]));
        let mut x0 = 0;
        for t in &tiles {
            image::imageops::replace(&mut strip, t, x0 as i64, 0);
            x0 += t.width() + gap;
        }
        strip.save(dir.join("items").join(format!("item_{i:03}.png")))?;
    }
    Ok(())
}
