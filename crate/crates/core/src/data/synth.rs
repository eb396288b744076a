//! Synthetic geometric-shape images and QA pairs.
//!
//! An image reference `synth:<shape>:<color>:<size>:<location>` names a
//! deterministic drawing, so fixture corpora carry no binary files.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::records::{AnswerType, Attribute, QaRecord};
use crate::error::{Error, Result};

pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "cross", "diamond", "ring"];
pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "orange", "white", "cyan"];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];
pub const LOCATIONS: [&str; 5] = ["left", "right", "top", "bottom", "center"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub shape: String,
    pub color: String,
    pub size: String,
    pub location: String,
}

impl Scene {
    pub fn image_ref(&self) -> String {
        format!("synth:{}:{}:{}:{}", self.shape, self.color, self.size, self.location)
    }

    pub fn parse(image_ref: &str) -> Result<Self> {
        let parts: Vec<&str> = image_ref.split(':').collect();
        let bad = || Error::Input(format!("bad synthetic image reference `{image_ref}`"));
        let [tag, shape, color, size, location] = parts.as_slice() else {
            return Err(bad());
        };
        if *tag != "synth"
            || !SHAPES.contains(shape)
            || !COLORS.contains(color)
            || !SIZES.contains(size)
            || !LOCATIONS.contains(location)
        {
            return Err(bad());
        }
        Ok(Self {
            shape: shape.to_string(),
            color: color.to_string(),
            size: size.to_string(),
            location: location.to_string(),
        })
    }

    fn rgb(&self) -> [f32; 3] {
        match self.color.as_str() {
            "red" => [0.9, 0.1, 0.1],
            "green" => [0.1, 0.8, 0.2],
            "blue" => [0.15, 0.25, 0.95],
            "yellow" => [0.95, 0.9, 0.1],
            "purple" => [0.6, 0.15, 0.8],
            "orange" => [1.0, 0.55, 0.05],
            "white" => [0.97, 0.97, 0.97],
            _ => [0.1, 0.9, 0.9],
        }
    }

    /// Row-major `size × size × 3` pixels in `[0, 1]`.
    pub fn render(&self, size: usize) -> Vec<f32> {
        let s = size as f32;
        let (cx, cy) = match self.location.as_str() {
            "left" => (0.27, 0.5),
            "right" => (0.73, 0.5),
            "top" => (0.5, 0.27),
            "bottom" => (0.5, 0.73),
            _ => (0.5, 0.5),
        };
        let r = match self.size.as_str() {
            "large" => 0.22,
            "medium" => 0.17,
            _ => 0.11,
        };
        let color = self.rgb();
        let mut px = vec![0.08f32; size * size * 3];
        for y in 0..size {
            for x in 0..size {
                let u = (x as f32 + 0.5) / s - cx;
                let v = (y as f32 + 0.5) / s - cy;
                let inside = match self.shape.as_str() {
                    "circle" => u * u + v * v <= r * r,
                    "square" => u.abs() <= r * 0.85 && v.abs() <= r * 0.85,
                    "triangle" => v <= r * 0.8 && v >= -r && u.abs() <= (v + r) * 0.6,
                    "diamond" => u.abs() + v.abs() <= r,
                    "ring" => {
                        let d2 = u * u + v * v;
                        d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55)
                    }
                    _ => (u.abs() <= r * 0.3 && v.abs() <= r) || (v.abs() <= r * 0.3 && u.abs() <= r),
                };
                if inside {
                    px[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
        px
    }
}

/// QA pairs asked about a scene, one per question family.
pub fn scene_questions(scene: &Scene, rng: &mut impl Rng) -> Vec<QaRecord> {
    let image = scene.image_ref();
    let open = |q: &str, a: &str, attr| QaRecord {
        image: image.clone(),
        question: q.into(),
        answer: a.into(),
        answer_type: AnswerType::Open,
        attribute: attr,
    };
    let probe_shape = *SHAPES.choose(rng).expect("non-empty");
    let probe_loc = *LOCATIONS.choose(rng).expect("non-empty");
    let yes_no = |b: bool| if b { "yes" } else { "no" };
    vec![
        open("What shape is shown in the image?", &scene.shape, Attribute::Shape),
        open("Where is the object located?", &scene.location, Attribute::Location),
        open("What is the size of the object?", &scene.size, Attribute::Size),
        open("What color is the object?", &scene.color, Attribute::Other),
        QaRecord {
            image: image.clone(),
            question: format!("Is the object a {probe_shape}?"),
            answer: yes_no(probe_shape == scene.shape).into(),
            answer_type: AnswerType::Closed,
            attribute: Attribute::Shape,
        },
        QaRecord {
            image: image.clone(),
            question: format!("Is the object on the {probe_loc}?"),
            answer: yes_no(probe_loc == scene.location).into(),
            answer_type: AnswerType::Closed,
            attribute: Attribute::Location,
        },
    ]
}

/// `n` QA records over random scenes, seeded.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<QaRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let scene = Scene {
            shape: SHAPES.choose(&mut rng).unwrap().to_string(),
            color: COLORS.choose(&mut rng).unwrap().to_string(),
            size: SIZES.choose(&mut rng).unwrap().to_string(),
            location: LOCATIONS.choose(&mut rng).unwrap().to_string(),
        };
        let qs = scene_questions(&scene, &mut rng);
        let pick = rng.random_range(0..qs.len());
        out.push(qs[pick].clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_ref_round_trip() {
        let s = Scene::parse("synth:circle:red:large:left").unwrap();
        assert_eq!(s.image_ref(), "synth:circle:red:large:left");
        assert!(Scene::parse("synth:blob:red:large:left").is_err());
        assert!(Scene::parse("foo.png").is_err());
    }

    #[test]
    fn rendering_differs_by_attribute() {
        let a = Scene::parse("synth:circle:red:large:left").unwrap().render(32);
        let b = Scene::parse("synth:circle:red:large:right").unwrap().render(32);
        let c = Scene::parse("synth:square:red:large:left").unwrap().render(32);
        assert_eq!(a.len(), 32 * 32 * 3);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn corpus_is_seeded() {
        assert_eq!(synthetic_corpus(20, 4), synthetic_corpus(20, 4));
        assert_ne!(synthetic_corpus(20, 4), synthetic_corpus(20, 5));
    }
}
