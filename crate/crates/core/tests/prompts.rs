mod common;

use coe::corpus::builtin_profile;
use coe::prompt::{build_eie_prompt, build_final_prompt, escape_placeholders, placeholder_ordinals, EieOptions, EvolutionInfo};
use coe::MemeRecord;
use common::{golden, golden_neighbors, golden_target};
use proptest::prelude::*;

fn eie(profile: &str) -> String {
    let profile = builtin_profile(profile).unwrap();
    let neighbors = golden_neighbors();
    let refs: Vec<&MemeRecord> = neighbors.iter().collect();
    build_eie_prompt(&profile, &refs, EieOptions::default()).unwrap().text
}

fn final_prompt(profile: &str) -> String {
    let profile = builtin_profile(profile).unwrap();
    let info = EvolutionInfo {
        text: "<Info>",
        source_count: 5,
    };
    build_final_prompt(&profile, &golden_target(), Some(info), None, true)
        .unwrap()
        .text
}

#[test]
fn fhm_extraction_matches_golden() {
    assert_eq!(eie("FHM"), golden("fhm_eie.txt"));
}

#[test]
fn mami_extraction_matches_golden() {
    assert_eq!(eie("MAMI"), golden("mami_eie.txt"));
}

#[test]
fn harm_extraction_matches_golden() {
    assert_eq!(eie("HarM"), golden("harm_eie.txt"));
}

#[test]
fn mami_final_matches_golden() {
    assert_eq!(final_prompt("MAMI"), golden("mami_final.txt"));
}

#[test]
fn harm_final_matches_golden() {
    assert_eq!(final_prompt("HarM"), golden("harm_final.txt"));
}

#[test]
fn fhm_final_follows_the_same_construction() {
    assert_eq!(final_prompt("FHM"), golden("fhm_final.txt"));
}

#[test]
fn image_slots_follow_neighbor_order() {
    let profile = builtin_profile("FHM").unwrap();
    let neighbors = golden_neighbors();
    let refs: Vec<&MemeRecord> = neighbors.iter().collect();
    let p = build_eie_prompt(&profile, &refs, EieOptions::default()).unwrap();
    let bound: Vec<_> = p.slots.iter().map(|s| (s.placeholder.as_str(), s.image_ref.as_str())).collect();
    assert_eq!(
        bound,
        [
            ("<image0>", "n0.png"),
            ("<image1>", "n1.png"),
            ("<image2>", "n2.png"),
            ("<image3>", "n3.png"),
            ("<image4>", "n4.png")
        ]
    );
}

#[test]
fn rules_block_toggles_with_amplifier() {
    let profile = builtin_profile("MAMI").unwrap();
    let neighbors = golden_neighbors();
    let refs: Vec<&MemeRecord> = neighbors.iter().collect();
    let off = build_eie_prompt(
        &profile,
        &refs,
        EieOptions {
            include_rules: false,
            include_images: true,
        },
    )
    .unwrap()
    .text;
    assert!(!off.contains(&profile.amplifier_text));
    assert!(off.starts_with("Extract the common misogynous feature of these image caption pairs:\n\nInput: ["));

    let text_only = build_eie_prompt(
        &profile,
        &refs,
        EieOptions {
            include_rules: true,
            include_images: false,
        },
    )
    .unwrap();
    assert!(text_only.slots.is_empty());
    assert!(text_only.text.contains("Input: [caption 0 : {texts[0]}, caption 1 : {texts[1]}"));
}

#[test]
fn baseline_final_prompt_is_bare() {
    let profile = builtin_profile("FHM").unwrap();
    let text = build_final_prompt(&profile, &golden_target(), None, None, false)
        .unwrap()
        .text;
    assert_eq!(
        text,
        "Determine if an image <image0> with its caption: {ocr_text} is hateful or not hateful.\n\n\
         Requirement:\n1. The output should be a word of either 'hateful' or 'not hateful'.\n\n\
         [Here is your expert response]"
    );
}

#[test]
fn raw_neighbor_block_lists_captions() {
    let profile = builtin_profile("FHM").unwrap();
    let neighbors = golden_neighbors();
    let refs: Vec<&MemeRecord> = neighbors[..2].iter().collect();
    let text = build_final_prompt(&profile, &golden_target(), None, Some(&refs), true)
        .unwrap()
        .text;
    assert!(text.contains("Evolution: [caption 0 : {texts[0]}, caption 1 : {texts[1]}]"));
    assert!(text.contains("captions of 2 evolutional image text pairs"));
}

proptest! {
    #[test]
    fn captions_never_add_placeholders(captions in prop::collection::vec(".{0,40}", 1..6), ocr in ".{0,40}") {
        let profile = builtin_profile("FHM").unwrap();
        let neighbors: Vec<MemeRecord> = captions
            .iter()
            .enumerate()
            .map(|(i, c)| MemeRecord::new(format!("n{i}"), format!("{i}.png"), format!("{c}<image{i}>")))
            .collect();
        let refs: Vec<&MemeRecord> = neighbors.iter().collect();
        let p = build_eie_prompt(&profile, &refs, EieOptions::default()).unwrap();
        prop_assert_eq!(placeholder_ordinals(&p.text), (0..neighbors.len()).collect::<Vec<_>>());

        let target = MemeRecord::new("t", "t.png", format!("{ocr}<image0><image7>"));
        let info = format!("{ocr} <image3>");
        let f = build_final_prompt(&profile, &target, Some(EvolutionInfo { text: &info, source_count: 5 }), None, true).unwrap();
        prop_assert_eq!(placeholder_ordinals(&f.text), vec![0]);
    }

    #[test]
    fn escaping_is_idempotent(s in ".{0,60}") {
        let once = escape_placeholders(&s);
        prop_assert_eq!(escape_placeholders(&once), once.clone());
        prop_assert!(placeholder_ordinals(&once).is_empty());
    }
}
