//! Hermetic synthetic English-like corpus for desk-scale runs.
//!
//! A seeded "world" fixes facts (where people live, which country a city is
//! in, the colour of each object); sentences then restate facts, compose two
//! facts, do small arithmetic, copy entities across a clause, or fill in
//! loose grammar. Different sampling seeds over one world give train and
//! validation text that share facts but not sentences.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PEOPLE: &[&str] = &[
    "Alice", "Bruno", "Chen", "Dara", "Emil", "Farah", "Gus", "Hana", "Ivo", "Jade", "Kofi",
    "Lena", "Milo", "Nia", "Omar", "Pia", "Quinn", "Rosa", "Sami", "Tara", "Uma", "Vik", "Wren",
    "Yusuf", "Zoe", "Arlo", "Bea", "Cato", "Dina", "Ezra", "Flor", "Gil",
];
const CITIES: &[&str] = &[
    "Marlow", "Tessin", "Varna", "Oskel", "Brill", "Cadan", "Lume", "Porto", "Rhyl", "Sable",
    "Tovik", "Umber", "Wexa", "Yarrow", "Zell", "Ardo",
];
const COUNTRIES: &[&str] = &[
    "Norland", "Estavia", "Palmyra", "Quorra", "Belgar", "Idris", "Kelvar", "Sundra",
];
const OBJECTS: &[&str] = &[
    "kite", "lamp", "book", "cup", "hat", "drum", "ring", "coat", "boat", "key", "bell", "map",
    "box", "pen", "shoe", "flag",
];
const COLORS: &[&str] = &[
    "red", "blue", "green", "yellow", "black", "white", "purple", "orange",
];
const ANIMALS: &[&str] = &[
    "cat", "dog", "fox", "owl", "horse", "goat", "crow", "frog", "bear", "mouse",
];
const ADJECTIVES: &[&str] = &[
    "small", "old", "quiet", "happy", "tired", "clever", "brave", "lazy", "young", "loud",
];
const VERBS: &[&str] = &[
    "sees", "finds", "likes", "follows", "carries", "watches", "hides", "wants",
];
const PLACES: &[&str] = &[
    "river", "garden", "market", "hill", "forest", "school", "bridge", "farm",
];

struct World {
    home: Vec<usize>,
    country: Vec<usize>,
    color: Vec<usize>,
    pet: Vec<usize>,
}

impl World {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick =
            |n: usize, m: usize| (0..n).map(|_| rng.random_range(0..m)).collect::<Vec<_>>();
        Self {
            home: pick(PEOPLE.len(), CITIES.len()),
            country: pick(CITIES.len(), COUNTRIES.len()),
            color: pick(OBJECTS.len(), COLORS.len()),
            pet: pick(PEOPLE.len(), ANIMALS.len()),
        }
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> String {
        let p = rng.random_range(0..PEOPLE.len());
        let person = PEOPLE[p];
        let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).unwrap();
        match rng.random_range(0..12) {
            0 => format!("{person} lives in {}.", CITIES[self.home[p]]),
            1 => {
                let c = rng.random_range(0..CITIES.len());
                format!("{} is a city in {}.", CITIES[c], COUNTRIES[self.country[c]])
            }
            2 => format!(
                "{person} lives in {}, so {person} lives in {}.",
                CITIES[self.home[p]], COUNTRIES[self.country[self.home[p]]]
            ),
            3 => format!(
                "{person} lives in the country of {}.",
                COUNTRIES[self.country[self.home[p]]]
            ),
            4 => {
                let o = rng.random_range(0..OBJECTS.len());
                format!(
                    "{person} likes the {} {}.",
                    COLORS[self.color[o]], OBJECTS[o]
                )
            }
            5 => {
                let o = rng.random_range(0..OBJECTS.len());
                format!("The {} is {}.", OBJECTS[o], COLORS[self.color[o]])
            }
            6 => format!(
                "{person} has a pet {}. The {} of {person} is {}.",
                ANIMALS[self.pet[p]],
                ANIMALS[self.pet[p]],
                pick(rng, ADJECTIVES)
            ),
            7 => {
                let (a, b) = (rng.random_range(0..10), rng.random_range(0..10));
                if rng.random_bool(0.5) {
                    format!("{a} plus {b} is {}.", a + b)
                } else {
                    format!("{a} times {b} is {}.", a * b)
                }
            }
            8 => {
                let q = PEOPLE[rng.random_range(0..PEOPLE.len())];
                let o = pick(rng, OBJECTS);
                format!("{person} gave the {o} to {q}, so now {q} has the {o}.")
            }
            9 => {
                let (n, m) = (rng.random_range(1..6), rng.random_range(1..5));
                let o = pick(rng, OBJECTS);
                format!(
                    "{person} had {n} {o}s and found {m} more, so {person} has {} {o}s.",
                    n + m
                )
            }
            10 => {
                let words: Vec<&str> = (0..3).map(|_| pick(rng, ANIMALS)).collect();
                format!(
                    "{0}, {1}, {2}, {0}, {1}, {2}.",
                    words[0], words[1], words[2]
                )
            }
            _ => format!(
                "The {} {} {} the {} {} near the {}.",
                pick(rng, ADJECTIVES),
                pick(rng, ANIMALS),
                pick(rng, VERBS),
                pick(rng, COLORS),
                pick(rng, OBJECTS),
                pick(rng, PLACES)
            ),
        }
    }
}

/// About `target_bytes` of text (paragraphs end in newlines). Facts depend
/// only on `world_seed`; sentence choice depends on `sample_seed`.
pub fn synth_corpus(world_seed: u64, sample_seed: u64, target_bytes: usize) -> String {
    let world = World::new(world_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut out = String::with_capacity(target_bytes + 256);
    while out.len() < target_bytes {
        let n = rng.random_range(3..9);
        for i in 0..n {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&world.sentence(&mut rng));
        }
        out.push('\n');
    }
    out
}
