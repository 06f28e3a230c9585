//! Attribute vocabularies for inversion and evaluation.

pub const OBJECTS: [&str; 13] = [
    "chair", "dog", "book", "elephant", "guitar", "pillow", "rabbit", "umbrella", "yacht", "house", "cube", "sphere",
    "car",
];

pub const COLORS: [&str; 11] = [
    "black", "blue", "brown", "gray", "green", "orange", "pink", "purple", "red", "white", "yellow",
];

pub const STYLES_EVAL: [&str; 7] = [
    "watercolor",
    "oil painting",
    "vector art",
    "pop art style",
    "3D rendering",
    "impressionism picture",
    "graffiti",
];

/// Pool sampled for the color-style regularizer during inversion.
pub const STYLES_TRAIN: [&str; 26] = [
    "oil painting",
    "vector art",
    "pop art style",
    "3D rendering",
    "impressionism picture",
    "graffiti",
    "fuzzy",
    "shiny",
    "bright",
    "fluffy",
    "sparkly",
    "dull",
    "smooth",
    "rough",
    "jagged",
    "striped",
    "painting",
    "retro",
    "vintage",
    "modern",
    "bohemian",
    "industrial",
    "rustic",
    "classic",
    "contemporary",
    "futuristic",
];

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn unique(list: &[&str]) -> bool {
        list.iter().collect::<BTreeSet<_>>().len() == list.len()
    }

    #[test]
    fn lists_are_unique_and_sized() {
        assert!(unique(&OBJECTS) && unique(&COLORS) && unique(&STYLES_EVAL) && unique(&STYLES_TRAIN));
        assert_eq!((OBJECTS.len(), COLORS.len(), STYLES_EVAL.len(), STYLES_TRAIN.len()), (13, 11, 7, 26));
    }

    #[test]
    fn color_list_matches_palette_vocabulary() {
        let names: Vec<&str> = crate::palette::COLOR_VOCABULARY.iter().map(|c| c.name).collect();
        assert_eq!(names, COLORS);
    }
}
