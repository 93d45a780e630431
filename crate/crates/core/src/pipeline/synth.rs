//! Synthetic dataset in the Market1501 layout: seeded per-identity clothing
//! patterns rendered to JPEG, recorded generator responses built from a
//! template vocabulary (a share of them malformed), a ready-to-use config
//! and a ground-truth file.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{io_err, write_atomic, Config, PipelineError, SplitCounts};
use crate::clients::{fixture_key, ClientMode, FixtureDir, FixtureRecord};
use crate::evalkit::{Split, DISTRACTOR_ID, JUNK_ID};

pub const TRUTH_FILE: &str = "synth_truth.json";

const HEIGHT: u32 = 128;
const WIDTH: u32 = 64;

const COLORS: [(&str, [u8; 3]); 12] = [
    ("black", [25, 25, 25]),
    ("white", [235, 235, 235]),
    ("red", [200, 30, 30]),
    ("blue", [30, 60, 200]),
    ("green", [30, 150, 60]),
    ("yellow", [230, 210, 40]),
    ("gray", [128, 128, 128]),
    ("brown", [120, 70, 30]),
    ("pink", [240, 140, 180]),
    ("orange", [240, 130, 20]),
    ("purple", [120, 40, 150]),
    ("navy", [20, 30, 90]),
];
const HAIR: [&str; 3] = ["short hair", "long hair", "ponytail"];
const HAIR_COLORS: [usize; 4] = [0, 7, 5, 6];
const UPPER: [&str; 5] = ["t-shirt", "jacket", "sweater", "shirt", "coat"];
const LOWER: [&str; 4] = ["jeans", "trousers", "shorts", "skirt"];
const BAGS: [&str; 3] = ["backpack", "handbag", "shoulder bag"];
const BACKGROUND: [(&str, &str); 6] = [
    ("street", "walking on"),
    ("sidewalk", "standing on"),
    ("building", "in front of"),
    ("car", "next to"),
    ("tree", "near"),
    ("bench", "near"),
];
const SKIN: [u8; 3] = [224, 172, 140];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_identities: usize,
    pub test_identities: usize,
    pub images_per_identity: usize,
    /// Images of each test identity placed in the query split.
    pub queries_per_identity: usize,
    pub cameras: usize,
    pub junk_images: usize,
    pub distractor_images: usize,
    /// Every n-th generator response is malformed (0 disables).
    pub malformed_every: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_identities: 8,
            test_identities: 8,
            images_per_identity: 10,
            queries_per_identity: 2,
            cameras: 3,
            junk_images: 2,
            distractor_images: 2,
            malformed_every: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthSample {
    pub image_id: String,
    pub identity: i64,
    pub camera: i64,
    pub split: Split,
}

/// What the generator wrote; ingestion of the tree must reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthConfig,
    pub data_root: PathBuf,
    pub train_ids: Vec<i64>,
    pub test_ids: Vec<i64>,
    pub train: SplitCounts,
    pub query: SplitCounts,
    pub gallery: SplitCounts,
    pub samples: Vec<TruthSample>,
    /// Image ids whose recorded response is malformed but rule-repairable.
    pub rule_repairable: Vec<String>,
    /// Image ids whose recorded response needs the language-model repair.
    pub llm_repairable: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
enum Pattern {
    Plain,
    HorizontalStripes(u32),
    VerticalStripes(u32),
    Checker(u32),
}

#[derive(Debug, Clone)]
struct Appearance {
    hair: usize,
    hair_color: usize,
    upper: usize,
    upper_color: usize,
    lower: usize,
    lower_color: usize,
    shoes_color: usize,
    pattern: Pattern,
    bag: Option<(usize, usize)>,
}

impl Appearance {
    fn sample(rng: &mut ChaCha8Rng, taken: &mut Vec<(usize, usize)>) -> Self {
        let (upper_color, lower_color) = loop {
            let pair = (rng.gen_range(0..COLORS.len()), rng.gen_range(0..COLORS.len()));
            if pair.0 != pair.1 && !taken.contains(&pair) {
                taken.push(pair);
                break pair;
            }
        };
        let pattern = match rng.gen_range(0..4) {
            0 => Pattern::Plain,
            1 => Pattern::HorizontalStripes(rng.gen_range(3..7)),
            2 => Pattern::VerticalStripes(rng.gen_range(3..7)),
            _ => Pattern::Checker(rng.gen_range(4..8)),
        };
        Self {
            hair: rng.gen_range(0..HAIR.len()),
            hair_color: HAIR_COLORS[rng.gen_range(0..HAIR_COLORS.len())],
            upper: rng.gen_range(0..UPPER.len()),
            upper_color,
            lower: rng.gen_range(0..LOWER.len()),
            lower_color,
            shoes_color: rng.gen_range(0..COLORS.len()),
            pattern,
            bag: rng
                .gen_bool(0.6)
                .then(|| (rng.gen_range(0..BAGS.len()), rng.gen_range(0..COLORS.len()))),
        }
    }

    fn upper_text(&self) -> String {
        let suffix = match self.pattern {
            Pattern::Plain => "",
            Pattern::HorizontalStripes(_) | Pattern::VerticalStripes(_) => " with stripes",
            Pattern::Checker(_) => " with checks",
        };
        format!("{} {}{suffix}", COLORS[self.upper_color].0, UPPER[self.upper])
    }
}

fn patterned(color: [u8; 3], pattern: Pattern, x: u32, y: u32) -> [u8; 3] {
    let dark = match pattern {
        Pattern::Plain => false,
        Pattern::HorizontalStripes(p) => (y / p) % 2 == 1,
        Pattern::VerticalStripes(p) => (x / p) % 2 == 1,
        Pattern::Checker(p) => ((x / p) + (y / p)) % 2 == 1,
    };
    if dark {
        color.map(|c| c / 2 + 20)
    } else {
        color
    }
}

fn render_person(a: &Appearance, camera: i64, rng: &mut ChaCha8Rng) -> RgbImage {
    let background = [rng.gen_range(70..190u8), rng.gen_range(70..190u8), rng.gen_range(70..190u8)];
    let dx: i32 = rng.gen_range(-4..=4);
    let dy: i32 = rng.gen_range(-3..=3);
    let brightness: f64 = rng.gen_range(0.85..1.15);
    let tint = [1.0 + 0.05 * (camera % 3) as f64, 1.0, 1.0 - 0.05 * (camera % 2) as f64];
    let color = |i: usize| COLORS[i].1;
    RgbImage::from_fn(WIDTH, HEIGHT, |px, py| {
        let x = px as i32 - dx;
        let y = py as i32 - dy;
        let (hx, hy) = ((x - 32) as f64 / 8.0, (y - 17) as f64 / 10.0);
        let base = if hx * hx + hy * hy <= 1.0 {
            if y < 15 {
                color(a.hair_color)
            } else {
                SKIN
            }
        } else if (28..72).contains(&y) && (18..46).contains(&x) {
            patterned(color(a.upper_color), a.pattern, x as u32, y as u32)
        } else if (30..66).contains(&y) && ((12..18).contains(&x) || (46..52).contains(&x)) {
            color(a.upper_color)
        } else if let (Some((_, bag_color)), true, true) = (a.bag, (36..64).contains(&y), (52..60).contains(&x)) {
            color(bag_color)
        } else if (72..116).contains(&y) && ((20..31).contains(&x) || (33..44).contains(&x)) {
            color(a.lower_color)
        } else if (116..122).contains(&y) && ((19..31).contains(&x) || (33..45).contains(&x)) {
            color(a.shoes_color)
        } else {
            background
        };
        let mut out = [0u8; 3];
        for c in 0..3 {
            let noise: f64 = rng.gen_range(-10.0..10.0);
            out[c] = (base[c] as f64 * brightness * tint[c] + noise).clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    })
}

fn render_noise(rng: &mut ChaCha8Rng) -> RgbImage {
    let base = [rng.gen_range(40..220u8), rng.gen_range(40..220u8), rng.gen_range(40..220u8)];
    RgbImage::from_fn(WIDTH, HEIGHT, |_, _| {
        Rgb(base.map(|b| (b as i32 + rng.gen_range(-40..40)).clamp(0, 255) as u8))
    })
}

fn save_jpeg(img: &RgbImage, path: &Path) -> Result<(), PipelineError> {
    let mut bytes = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut bytes, 92)
        .encode_image(img)
        .map_err(|e| PipelineError::Store(format!("{}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

/// Template scene graph of one image with per-image variation.
fn scene_graph(a: &Appearance, rng: &mut ChaCha8Rng) -> serde_json::Value {
    let mut person_attrs = vec![
        format!("{} {}", COLORS[a.hair_color].0, HAIR[a.hair]),
        a.upper_text(),
        format!("{} {}", COLORS[a.lower_color].0, LOWER[a.lower]),
    ];
    if rng.gen_bool(0.25) {
        person_attrs.remove(rng.gen_range(0..person_attrs.len()));
    }
    let mut nodes = vec![
        json!({"id": "person", "attributes": person_attrs}),
        json!({"id": "shoes", "attributes": [COLORS[a.shoes_color].0]}),
    ];
    let mut edges = vec![json!({"source": "person", "target": "shoes", "relation": "wearing"})];
    if let Some((bag, bag_color)) = a.bag {
        nodes.push(json!({"id": BAGS[bag], "attributes": [COLORS[bag_color].0]}));
        edges.push(json!({"source": "person", "target": BAGS[bag], "relation": "carrying"}));
    }
    if rng.gen_bool(0.7) {
        let (place, relation) = BACKGROUND[rng.gen_range(0..BACKGROUND.len())];
        let attrs: Vec<&str> = if rng.gen_bool(0.5) { vec!["gray"] } else { vec![] };
        nodes.push(json!({"id": place, "attributes": attrs}));
        edges.push(json!({"source": "person", "target": place, "relation": relation}));
    }
    json!({"nodes": nodes, "edges": edges})
}

enum Corruption {
    Fenced,
    TrailingCommas,
    AliasedEdgeKeys,
}

fn corrupt(doc: &serde_json::Value, how: Corruption) -> String {
    let pretty = serde_json::to_string_pretty(doc).expect("document serializes");
    match how {
        Corruption::Fenced => format!("Here is the scene graph:\n```json\n{pretty}\n```\nLet me know if you need more."),
        Corruption::TrailingCommas => pretty.replace("\n  ]", ",\n  ]").replace("\"\n    }", "\",\n    }"),
        Corruption::AliasedEdgeKeys => pretty
            .replace("\"source\":", "\"from\":")
            .replace("\"target\":", "\"to\":"),
    }
}

fn prose(a: &Appearance) -> String {
    format!(
        "The person has {} {} and wears a {} with {} {}.",
        COLORS[a.hair_color].0,
        HAIR[a.hair],
        a.upper_text(),
        COLORS[a.lower_color].0,
        LOWER[a.lower]
    )
}

fn image_name(pid: i64, camera: i64, frame: usize) -> String {
    let id = if pid < 0 { pid.to_string() } else { format!("{pid:04}") };
    format!("{id}_c{camera}s1_{frame:06}_00")
}

fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "bounding_box_train",
        Split::Query => "query",
        Split::Gallery => "bounding_box_test",
    }
}

/// Writes the dataset under `root`: `market/` (images), `fixtures/lvlm`,
/// `fixtures/repair`, `config.toml` and the ground-truth file.
pub fn synthesize(root: &Path, cfg: &SynthConfig) -> Result<SynthTruth, PipelineError> {
    if cfg.images_per_identity <= cfg.queries_per_identity || cfg.cameras == 0 {
        return Err(PipelineError::Config("each identity needs gallery images and a camera".into()));
    }
    let data_root = root.join("market");
    let lvlm = FixtureDir::new(root.join("fixtures/lvlm"));
    let repair = FixtureDir::new(root.join("fixtures/repair"));
    for split in [Split::Train, Split::Query, Split::Gallery] {
        let dir = data_root.join(split_dir(split));
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7379_6e74_68);
    let total_ids = cfg.train_identities + cfg.test_identities;
    let mut taken = Vec::new();
    let appearances: Vec<Appearance> = (0..total_ids).map(|_| Appearance::sample(&mut rng, &mut taken)).collect();
    // Interleave raw ids so train and test ranges are not contiguous.
    let mut pids: Vec<i64> = (1..=total_ids as i64).map(|i| i * 3 + 1).collect();
    pids.shuffle(&mut rng);
    let (train_ids, test_ids) = pids.split_at(cfg.train_identities);
    let (mut train_ids, mut test_ids) = (train_ids.to_vec(), test_ids.to_vec());

    let mut samples = Vec::new();
    let mut rule_repairable = Vec::new();
    let mut llm_repairable = Vec::new();
    let mut response_index = 0usize;
    let mut record = |image_id: &str, doc: serde_json::Value, a: Option<&Appearance>| {
        response_index += 1;
        let every = cfg.malformed_every;
        let text = match (every > 0 && response_index % every == 0, a) {
            (true, Some(a)) => {
                let k = response_index / every;
                if k % 4 == 3 {
                    let text = prose(a);
                    let fixed = serde_json::to_string_pretty(&doc).expect("document serializes");
                    repair.store(&fixture_key(&text), &FixtureRecord { request: text.clone(), response: fixed })?;
                    llm_repairable.push(image_id.to_string());
                    text
                } else {
                    rule_repairable.push(image_id.to_string());
                    let how = [Corruption::Fenced, Corruption::TrailingCommas, Corruption::AliasedEdgeKeys];
                    corrupt(&doc, how.into_iter().nth(k % 3).expect("three variants"))
                }
            }
            _ => serde_json::to_string_pretty(&doc).expect("document serializes"),
        };
        lvlm.store(&fixture_key(image_id), &FixtureRecord { request: image_id.to_string(), response: text })
            .map_err(PipelineError::from)
    };

    for (k, (&pid, a)) in train_ids.iter().chain(test_ids.iter()).zip(&appearances).enumerate() {
        let is_train = k < cfg.train_identities;
        for j in 0..cfg.images_per_identity {
            let camera = (j % cfg.cameras) as i64 + 1;
            let split = match (is_train, j < cfg.queries_per_identity) {
                (true, _) => Split::Train,
                (false, true) => Split::Query,
                (false, false) => Split::Gallery,
            };
            let image_id = image_name(pid, camera, j * 25 + k);
            let img = render_person(a, camera, &mut rng);
            save_jpeg(&img, &data_root.join(split_dir(split)).join(format!("{image_id}.jpg")))?;
            let doc = scene_graph(a, &mut rng);
            record(&image_id, doc, Some(a))?;
            samples.push(TruthSample { image_id, identity: pid, camera, split });
        }
    }
    for (n, identity) in std::iter::repeat_n(JUNK_ID, cfg.junk_images)
        .chain(std::iter::repeat_n(DISTRACTOR_ID, cfg.distractor_images))
        .enumerate()
    {
        let camera = (n % cfg.cameras) as i64 + 1;
        let image_id = image_name(identity, camera, 900_000 + n);
        save_jpeg(&render_noise(&mut rng), &data_root.join("bounding_box_test").join(format!("{image_id}.jpg")))?;
        let (place, _) = BACKGROUND[n % BACKGROUND.len()];
        let doc = json!({"nodes": [{"id": place, "attributes": ["blurry"]}], "edges": []});
        record(&image_id, doc, None)?;
        samples.push(TruthSample { image_id, identity, camera, split: Split::Gallery });
    }

    train_ids.sort_unstable();
    test_ids.sort_unstable();
    let count = |split: Split, ids: usize| SplitCounts {
        images: samples.iter().filter(|s| s.split == split).count(),
        identities: ids,
    };
    let truth = SynthTruth {
        config: cfg.clone(),
        data_root: data_root.clone(),
        train: count(Split::Train, cfg.train_identities),
        query: count(Split::Query, cfg.test_identities),
        gallery: count(Split::Gallery, cfg.test_identities),
        train_ids,
        test_ids,
        samples,
        rule_repairable,
        llm_repairable,
    };
    write_atomic(&root.join(TRUTH_FILE), serde_json::to_string_pretty(&truth).expect("truth serializes").as_bytes())?;
    write_atomic(&root.join("config.toml"), synth_config(cfg).dump().as_bytes())?;
    Ok(truth)
}

/// Pipeline settings for a synthetic tree, relative to its root.
fn synth_config(cfg: &SynthConfig) -> Config {
    let ids_per_batch = 4.min(cfg.train_identities.max(2));
    Config {
        dataset: "market1501".into(),
        data_root: "market".into(),
        seed: cfg.seed,
        lvlm_mode: ClientMode::Replay,
        lvlm_fixtures: "fixtures/lvlm".into(),
        repair_mode: ClientMode::Replay,
        repair_fixtures: "fixtures/repair".into(),
        embedder_mode: ClientMode::Stub,
        backbone_mode: ClientMode::Stub,
        batch_size: ids_per_batch * 4,
        instances_per_id: 4,
        epochs: 20,
        steps_per_epoch: 10,
        warmup_epochs: 2,
        decay_epochs: vec![10, 15],
        base_lr: 0.0035,
        keep_checkpoints: 2,
        k1: 6,
        k2: 3,
        attribution_queries: 16,
        ..Config::default()
    }
}
