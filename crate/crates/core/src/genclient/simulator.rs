//! Desk-scale stand-in for a vision-language model.
//!
//! Each (group, knob) owns a canonical story. A request's story starts from
//! it and rewrites each word with probability `1 - h`, where `h` is the
//! group's configured homogeneity at the request's setting. At `h = 1` every
//! story in the group is the canonical one; below that the protagonist's
//! name is drawn injectively from the replicate index, so no two replicates
//! of a stimulus coincide.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GenError, GenerationRequest};
use crate::design::{Gender, Knob, Race};
use crate::seed;

pub(super) const MODEL_ID: &str = "simulator-v1";

/// Homogeneity of one group as a piecewise-linear function of the setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogeneityCurve {
    pub race: Race,
    pub gender: Gender,
    /// Applies to every knob when absent.
    #[serde(default)]
    pub knob: Option<Knob>,
    /// `(setting, homogeneity)` knots, sorted by setting. Values outside the
    /// knot range take the nearest end value.
    pub points: Vec<(f64, f64)>,
}

impl HomogeneityCurve {
    pub fn constant(race: Race, gender: Gender, h: f64) -> Self {
        HomogeneityCurve { race, gender, knob: None, points: vec![(0.0, h)] }
    }

    pub fn at(&self, setting: f64) -> f64 {
        let pts = &self.points;
        if setting <= pts[0].0 {
            return pts[0].1;
        }
        for w in pts.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if setting <= x1 {
                let t = (setting - x0) / (x1 - x0);
                return y0 + t * (y1 - y0);
            }
        }
        pts[pts.len() - 1].1
    }

    fn validate(&self) -> Result<(), GenError> {
        let who = format!("{} {}", self.race, self.gender);
        if self.points.is_empty() {
            return Err(GenError::BadHomogeneity(format!("{who}: no points")));
        }
        for w in self.points.windows(2) {
            if !(w[0].0 < w[1].0) {
                return Err(GenError::BadHomogeneity(format!("{who}: settings must increase")));
            }
        }
        for &(x, h) in &self.points {
            if !x.is_finite() || !(h > 0.0 && h <= 1.0) {
                return Err(GenError::BadHomogeneity(format!("{who}: homogeneity {h} not in (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HomogeneityTable {
    pub curves: Vec<HomogeneityCurve>,
}

impl HomogeneityTable {
    pub fn new(curves: Vec<HomogeneityCurve>) -> Result<Self, GenError> {
        for c in &curves {
            c.validate()?;
        }
        Ok(HomogeneityTable { curves })
    }

    /// Black and female groups more homogeneous; homogeneity falls with
    /// temperature and with top-p.
    pub fn reference() -> Self {
        let base = |race, gender| match (race, gender) {
            (Race::Black, Gender::Man) => 0.80,
            (Race::Black, Gender::Woman) => 0.85,
            (Race::White, Gender::Man) => 0.65,
            (Race::White, Gender::Woman) => 0.75,
        };
        let mut curves = Vec::new();
        for race in Race::ALL {
            for gender in Gender::ALL {
                let h = base(race, gender);
                curves.push(HomogeneityCurve {
                    race,
                    gender,
                    knob: Some(Knob::Temperature),
                    points: vec![(0.0, h), (2.0, h - 0.35)],
                });
                curves.push(HomogeneityCurve {
                    race,
                    gender,
                    knob: Some(Knob::TopP),
                    points: vec![(0.2, (h + 0.1).min(1.0)), (1.0, h - 0.15)],
                });
            }
        }
        HomogeneityTable { curves }
    }

    /// A knob-specific curve wins over a knob-agnostic one.
    pub fn homogeneity(&self, race: Race, gender: Gender, knob: Knob, setting: f64) -> Result<f64, GenError> {
        let group = self.curves.iter().filter(|c| c.race == race && c.gender == gender);
        let curve = group
            .clone()
            .find(|c| c.knob == Some(knob))
            .or_else(|| group.clone().find(|c| c.knob.is_none()))
            .ok_or(GenError::UnknownGroup { race, gender, knob })?;
        Ok(curve.at(setting))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorConfig {
    pub homogeneity: HomogeneityTable,
    /// Length of the canonical story in words.
    pub target_words: usize,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig { homogeneity: HomogeneityTable::reference(), target_words: 50 }
    }
}

/// Deterministic story for `request`, 40 to 60 words long.
pub fn simulate_story(request: &GenerationRequest, config: &SimulatorConfig) -> Result<String, GenError> {
    let seed = request.seed.ok_or(GenError::MissingSeed)?;
    let s = &request.stimulus;
    let h = config.homogeneity.homogeneity(s.race, s.gender, request.knob, request.setting.value())?;
    let variability = 1.0 - h;

    let group_seed = seed::mix(seed, &[s.race as u64, s.gender as u64, request.knob as u64]);
    let key_seed = seed::hash_str(seed, &request.key().to_string());
    let mut canon = seed::rng(group_seed);
    let mut rng = seed::rng(key_seed);

    let target = config.target_words.clamp(45, 55) as i64;
    let jitter = (variability * 10.0 * rng.random_range(-1.0..=1.0)).round() as i64;
    let body_words = (target + jitter).clamp(40, 60) as usize - 2;

    let canon_first = canon.random_range(0..FIRST_NAMES.len());
    let canon_last = canon.random_range(0..LAST_NAMES.len());
    let (first, last) = if h >= 1.0 {
        (canon_first, canon_last)
    } else {
        // 37 is coprime with 1600, so replicates 0..1600 get distinct names
        let n = FIRST_NAMES.len() * LAST_NAMES.len();
        let idx = (canon_first * LAST_NAMES.len() + canon_last + 1 + 37 * request.replicate_index as usize) % n;
        (idx / LAST_NAMES.len(), idx % LAST_NAMES.len())
    };

    let mut words = Vec::with_capacity(body_words + 2);
    words.push(FIRST_NAMES[first].to_string());
    words.push(LAST_NAMES[last].to_string());
    for i in 0..body_words {
        let canonical = VOCAB[canon.random_range(0..VOCAB.len())];
        let word = if variability > 0.0 && rng.random::<f64>() < variability {
            VOCAB[rng.random_range(0..VOCAB.len())]
        } else {
            canonical
        };
        if i + 1 == body_words {
            words.push(format!("{word}."));
        } else {
            words.push(word.to_string());
        }
    }
    Ok(words.join(" "))
}

const FIRST_NAMES: [&str; 40] = [
    "Aaron", "Abigail", "Adrian", "Alice", "Andre", "Angela", "Brandon", "Brenda", "Caleb", "Carmen", "Darius",
    "Denise", "Elijah", "Elena", "Felix", "Fiona", "Gavin", "Grace", "Hector", "Hannah", "Isaac", "Imani", "Jamal",
    "Jasmine", "Kevin", "Keisha", "Lucas", "Laura", "Marcus", "Monica", "Nathan", "Nadia", "Owen", "Olivia",
    "Philip", "Priya", "Quentin", "Rachel", "Samuel", "Tanya",
];

const LAST_NAMES: [&str; 40] = [
    "Adams", "Baker", "Bell", "Brooks", "Carter", "Coleman", "Davis", "Edwards", "Evans", "Fisher", "Foster",
    "Gray", "Green", "Hall", "Harris", "Hayes", "Hill", "Hughes", "Jackson", "James", "Jenkins", "Johnson", "Kelly",
    "King", "Lewis", "Long", "Martin", "Miller", "Morgan", "Murphy", "Nelson", "Parker", "Perry", "Powell", "Reed",
    "Robinson", "Ross", "Scott", "Turner", "Walker",
];

const VOCAB: &[&str] = &[
    "morning", "evening", "city", "village", "river", "garden", "kitchen", "market", "library", "school", "office",
    "studio", "workshop", "hospital", "church", "park", "bridge", "street", "window", "door", "table", "letter",
    "photograph", "guitar", "piano", "painting", "book", "journal", "camera", "bicycle", "train", "bus", "car",
    "airport", "harbor", "beach", "mountain", "forest", "field", "farm", "bakery", "cafe", "restaurant", "theater",
    "museum", "stadium", "classroom", "laboratory", "clinic", "factory", "neighborhood", "community", "family",
    "mother", "father", "sister", "brother", "daughter", "son", "grandmother", "grandfather", "friend", "neighbor",
    "teacher", "student", "doctor", "nurse", "engineer", "artist", "musician", "writer", "chef", "farmer",
    "mechanic", "lawyer", "scientist", "coach", "pilot", "soldier", "volunteer", "mentor", "stranger", "child",
    "dream", "hope", "courage", "kindness", "patience", "laughter", "memory", "promise", "secret", "journey",
    "challenge", "victory", "failure", "lesson", "gift", "surprise", "storm", "rain", "sunlight", "winter",
    "summer", "autumn", "spring", "night", "dawn", "quietly", "slowly", "suddenly", "gently", "proudly",
    "carefully", "always", "never", "often", "finally", "together", "alone", "again", "walked", "smiled",
    "laughed", "worked", "studied", "painted", "played", "sang", "cooked", "built", "wrote", "read", "listened",
    "watched", "remembered", "discovered", "believed", "helped", "carried", "opened", "closed", "returned",
    "traveled", "waited", "danced", "prayed", "taught", "learned", "founded", "repaired", "planted", "harvested",
    "shared", "saved", "lost", "found", "bright", "warm", "quiet", "busy", "old", "new", "small",
    "large", "tired", "curious", "determined", "gentle", "fierce", "calm", "young", "wise", "strong", "proud",
    "humble", "generous", "honest", "creative", "ambitious", "thoughtful", "resilient", "cheerful", "serious",
    "loyal", "brave", "anxious", "hopeful", "grateful", "the", "a", "and", "but", "with", "for", "to", "of",
    "in", "on", "under", "through", "after", "before", "while", "because", "every", "each", "their", "her",
    "his", "its", "our", "many", "few", "some", "one", "two", "three", "first", "last", "next", "long", "short",
    "hard", "easy", "deep", "open", "green", "blue", "golden", "silver", "red", "white", "dark", "light",
    "coffee", "bread", "music", "story", "song", "poem", "map", "key", "coat", "shoes",
];
