use rand::seq::SliceRandom;

use crate::seed::rng;

use super::scene::SceneSpec;

/// Caption templates; `{}` receives the object list.
pub const CAPTION_TEMPLATES: [&str; 7] = [
    "a photo of {}",
    "an image of {}",
    "a picture of {}",
    "a drawing of {}",
    "{} in a scene",
    "there is {}",
    "{}",
];

/// Name every object of `spec` as `a <color> <shape>`, in a seed-shuffled
/// order, joined with "and" and wrapped in a seed-chosen template.
pub fn caption_of(spec: &SceneSpec, seed: u64) -> String {
    let mut r = rng(seed);
    let mut names: Vec<String> = spec.objects.iter().map(|o| o.category()).collect();
    names.shuffle(&mut r);
    let list = names
        .iter()
        .map(|n| format!("a {n}"))
        .collect::<Vec<_>>()
        .join(" and ");
    let template = CAPTION_TEMPLATES.choose(&mut r).unwrap();
    template.replace("{}", &list)
}
