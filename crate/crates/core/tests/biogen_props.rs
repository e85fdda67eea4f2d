use std::collections::BTreeMap;

use memaudit::biogen::{self, AttackMode, AttributeTables, ChatDirection, PiiAttribute, PromptFormat};
use memaudit::rng;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn nationality_frequencies_follow_the_marginal() {
    let tables = AttributeTables::default_tables();
    let n = 10_000;
    let bios = biogen::sample_biographies(&tables, n, 2024);
    let mut observed: BTreeMap<&str, usize> = BTreeMap::new();
    for b in &bios {
        *observed.entry(b.nationality.as_str()).or_default() += 1;
    }
    let mut chi2 = 0.0;
    for nat in tables.nationalities() {
        let p = tables.nationality_probability(nat);
        let expected = p * n as f64;
        let got = observed.get(nat.as_str()).copied().unwrap_or(0) as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((got - expected).abs() <= 3.0 * sd, "{nat}: {got} vs {expected:.1} (sd {sd:.1})");
        chi2 += (got - expected).powi(2) / expected;
    }
    let dof = (tables.nationalities().len() - 1) as f64;
    let p_value = 1.0 - ChiSquared::new(dof).unwrap().cdf(chi2);
    assert!(p_value > 1e-3, "chi2 {chi2:.2} on {dof} dof, p = {p_value:.2e}");
}

#[test]
fn conditional_fields_come_from_the_nationality_tables() {
    let tables = AttributeTables::default_tables();
    for b in biogen::sample_biographies(&tables, 2_000, 8) {
        assert!(tables.first_names(&b.nationality).contains(&b.first_name));
        let last = b.full_name.strip_prefix(&format!("{} ", b.first_name)).unwrap();
        assert!(tables.last_names(&b.nationality).iter().any(|l| l == last));
        assert!(tables.universities(&b.nationality).contains(&b.university));
        assert_eq!(b.uuid.len(), 32);
        assert!(b.uuid.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parse_inverts_render(seed in any::<u64>()) {
        let tables = AttributeTables::default_tables();
        let bio = biogen::sample_biography(&tables, seed);
        prop_assert_eq!(biogen::render_biography(&bio), bio.rendered_text.clone());
        prop_assert_eq!(biogen::parse_biography(&bio.rendered_text).unwrap(), bio);
    }

    #[test]
    fn prompts_hold_the_answer_once(seed in any::<u64>(), k in 1usize..6, t in 0usize..7, f in 0usize..4) {
        let tables = AttributeTables::default_tables();
        let bios = biogen::sample_biographies(&tables, 30, seed);
        let target = PiiAttribute::ALL[t];
        let format = [PromptFormat::FullPrefixFullSuffix, PromptFormat::FullPrefix, PromptFormat::IntroPrefix, PromptFormat::NameOnly][f];
        let pool: Vec<String> = bios[1..].iter().map(|b| b.value(target)).collect();
        let p = biogen::make_attack_prompts(&bios[0], format, AttackMode::Infill, target, &pool, tables.email_domains(), k, seed).unwrap();
        let answer = bios[0].value(target);
        prop_assert_eq!(p.candidates.len(), k + 1);
        prop_assert_eq!(p.candidates.iter().filter(|c| **c == answer).count(), 1);
        prop_assert_eq!(p.correct(), answer.as_str());
        if target == PiiAttribute::Email {
            for c in &p.candidates {
                prop_assert!(biogen::char_overlap(c, &answer) >= biogen::EMAIL_OVERLAP);
            }
        }
        let full = p.filled(p.correct_index);
        match format {
            PromptFormat::FullPrefixFullSuffix => prop_assert_eq!(&full, &bios[0].rendered_text),
            PromptFormat::FullPrefix => prop_assert!(bios[0].rendered_text.starts_with(&full)),
            _ => {
                let tail = format!("{}.", answer);
                prop_assert!(full.ends_with(&tail));
            }
        }
    }
}

#[test]
fn full_suffix_requires_infill() {
    let tables = AttributeTables::default_tables();
    let bios = biogen::sample_biographies(&tables, 5, 1);
    let pool: Vec<String> = bios[1..].iter().map(|b| b.university.clone()).collect();
    let err = biogen::make_attack_prompts(&bios[0], PromptFormat::FullPrefixFullSuffix, AttackMode::Generative, PiiAttribute::University, &pool, &[], 2, 1);
    assert_eq!(err.unwrap_err().kind(), memaudit::ErrorKind::Validation);
}

const OPENERS: [&str; 6] = ["hi how are you", "hello there", "good evening", "hey", "what do you do for fun", "i just got home"];
const REPLIES: [&str; 6] = ["not bad thanks", "i am great", "tired from work", "just relaxing", "reading a book", "cooking dinner"];
const PERSONA: [&str; 8] = [
    "i m an amazing dancer.",
    "i have two cats.",
    "my favorite color is teal.",
    "i work night shifts.",
    "i grew up on a farm.",
    "i collect old maps.",
    "i am learning the cello.",
    "i never drink coffee.",
];

#[test]
fn personas_never_appear_in_rendered_chats() {
    let nouns = biogen::default_nouns();
    let mut hits = 0;
    let mut r = rng::seeded(77);
    let mut chats = Vec::new();
    for i in 0..1_000u64 {
        let names = (format!("speaker{i}a"), format!("speaker{i}b"));
        let turns = 2 + rng::below(&mut r, 6) as usize;
        let dialogue: Vec<(String, String)> = (0..turns)
            .map(|t| {
                let (who, pool) = if t % 2 == 0 { (&names.0, &OPENERS) } else { (&names.1, &REPLIES) };
                (who.clone(), pool[rng::below(&mut r, 6) as usize].to_string())
            })
            .collect();
        let persona: Vec<String> = rng::sample_distinct(&mut r, 0, 8, 3).into_iter().map(|j| PERSONA[j as usize].to_string()).collect();
        let chat = biogen::anonymize_chat(&dialogue, persona.clone(), &nouns, i).unwrap();
        let text = chat.render();
        hits += persona.iter().filter(|p| text.contains(p.as_str())).count();
        assert!(!text.contains(&names.0) && !text.contains(&names.1));
        assert!(text.starts_with("chatbot: "));
        assert_eq!(chat.hidden_persona, persona);
        let user = &chat.assigned_username;
        assert!(user.chars().next().unwrap().is_ascii_uppercase());
        assert!(user[user.len() - 3..].chars().all(|c| c.is_ascii_digit()));
        chats.push(chat);
    }
    assert_eq!(hits, 0);

    let pool: Vec<String> = chats[1..10].iter().map(|c| c.persona_text()).collect();
    let p = biogen::make_chat_attack(&chats[0], ChatDirection::PersonaGivenUsername, false, &pool, 9, 3).unwrap();
    assert_eq!(p.candidates.len(), 10);
    assert_eq!(p.prompt_text(), format!("{}: <candidate>", chats[0].assigned_username));
    let pool: Vec<String> = chats[1..10].iter().map(|c| c.assigned_username.clone()).collect();
    let p = biogen::make_chat_attack(&chats[0], ChatDirection::UsernameGivenPersona, true, &pool, 9, 3).unwrap();
    assert_eq!(p.prompt_text(), format!("{}<candidate>: {}", biogen::CHAT_PROMPT, chats[0].persona_text()));
}
