mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recipegen::augment::{
    self, build_examples, char_distribution, distribution_diff, ingredient_keywords, powerset_prefixes, split_dataset,
    AugmentConfig, CharMode, SplitSpec,
};
use recipegen::corpus::{
    self, clean_recipe, filter_by_length, filter_instructions, length_percentiles, load_recipes, CleanRecipe,
    CorpusFormat, InstructionLayout, RawRecipe, Rejection, BOOK_ADVERT,
};
use recipegen::serialize::{self, decode_recipe, encode_recipe, prettify, DecodeError, SpecialTokens};
use recipegen::sitemap::{
    extract_recipe, filter_recipe_urls, parse_sitemap, ElementPath, PageRejection, SiteProfile, DEFAULT_CATEGORY_LABELS,
};

fn recipe(title: &str, ingredients: &[&str], instructions: &[&str]) -> CleanRecipe {
    CleanRecipe {
        title: title.into(),
        ingredients: ingredients.iter().map(|s| s.to_string()).collect(),
        instructions: instructions.iter().map(|s| s.to_string()).collect(),
    }
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

// corpus

#[test]
fn recipe_box_fixture_loads_field_exact() {
    let loaded = load_recipes(&common::fixture("corpus/recipe_box.json"), CorpusFormat::RecipeBoxJson).unwrap();
    assert!(loaded.skipped.is_empty());
    assert_eq!(loaded.recipes.len(), 5);
    let first = &loaded.recipes[0];
    assert_eq!(
        *first,
        RawRecipe {
            id: "rb-001".into(),
            title: Some("Slow Cooker Chicken and Dumplings".into()),
            ingredients: strings(&["4 skinless chicken breasts", "2 tablespoons butter ADVERTISEMENT", "1 onion, finely diced"]),
            instructions: Some(
                "Place the chicken, butter and onion in a slow cooker. Cook for 5 hours on high.\nPlace the torn biscuit dough in the slow cooker."
                    .into()
            ),
            picture_link: Some("55lznCYBbs2mT8BTx6BTkLhynGHzM.".into()),
            layout: InstructionLayout::Plaintext,
        }
    );
    assert_eq!(loaded.recipes[1].picture_link, None);
    assert_eq!(loaded.recipes[4].instructions, None);
    let ids: Vec<&str> = loaded.recipes.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["rb-001", "rb-002", "rb-003", "rb-004", "rb-005"]);

    let clean = clean_recipe(first).unwrap();
    assert_eq!(clean.ingredients[1], "2 tablespoons butter");
    assert_eq!(
        clean.instructions,
        strings(&[
            "Place the chicken, butter and onion in a slow cooker.",
            "Cook for 5 hours on high.",
            "Place the torn biscuit dough in the slow cooker."
        ])
    );
    assert_eq!(clean_recipe(&loaded.recipes[4]), Err(Rejection::Incomplete));
}

#[test]
fn empty_json_object_gives_nothing() {
    let loaded = corpus::parse_recipes("{}", CorpusFormat::RecipeBoxJson).unwrap();
    assert!(loaded.recipes.is_empty() && loaded.skipped.is_empty());
}

#[test]
fn csv_fixture_splits_cells_and_reports_bad_rows() {
    let loaded = load_recipes(&common::fixture("corpus/three_column.csv"), CorpusFormat::ThreeColumnCsv).unwrap();
    assert_eq!(loaded.recipes.len(), 3);
    assert_eq!(loaded.skipped.len(), 1);
    assert_eq!(loaded.skipped[0].index, 2);
    let r = &loaded.recipes[0];
    assert_eq!(r.title.as_deref(), Some("Title"));
    assert_eq!(r.ingredients, strings(&["a", "b"]));
    assert_eq!(r.instructions.as_deref(), Some("do x, do y"));
    assert_eq!(clean_recipe(r).unwrap().instructions, strings(&["do x", "do y"]));
    assert_eq!(loaded.recipes[2].title.as_deref(), Some("Quoted, Title"));
}

#[test]
fn cleaning_fixture_keeps_seven() {
    let loaded = load_recipes(&common::fixture("corpus/cleaning.json"), CorpusFormat::RecipeBoxJson).unwrap();
    let results: Vec<_> = loaded.recipes.iter().map(clean_recipe).collect();
    let accepted: Vec<&CleanRecipe> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    assert_eq!(accepted.len(), 7);
    assert_eq!(results.iter().filter(|r| r.is_err()).count(), 3);
    assert_eq!(accepted[0].title, "Pie");
    assert!(accepted.iter().all(|r| !format!("{r:?}").contains("ADVERTISEMENT")));
}

#[test]
fn unreadable_and_malformed_files_are_errors() {
    assert!(load_recipes(&common::fixture("corpus/none.json"), CorpusFormat::RecipeBoxJson).is_err());
    assert!(corpus::parse_recipes("[1, 2]", CorpusFormat::RecipeBoxJson).is_err());
    assert!(corpus::parse_recipes("a,b\n1,2\n", CorpusFormat::ThreeColumnCsv).is_err());
}

fn recipe_of_len(n: usize) -> CleanRecipe {
    // "T" + " " + "i" + " " + steps: total = 4 + step length.
    recipe("T", &["i"], &[&"s".repeat(n - 4)])
}

#[test]
fn length_filter_counts_single_space_joins() {
    assert!(filter_by_length(vec![], 2000).is_empty());
    assert_eq!(recipe("ab", &["c d", "e"], &["fg"]).char_len(), "ab c d e fg".len());
    assert_eq!(recipe("é", &["ñ"], &["ü"]).char_len(), 5);
    let kept = filter_by_length(vec![recipe_of_len(2000)], 2000);
    assert_eq!(kept.len(), 1);
    let kept = filter_by_length(vec![recipe_of_len(74), recipe_of_len(1999), recipe_of_len(2001)], 2000);
    assert_eq!(kept.iter().map(CleanRecipe::char_len).collect::<Vec<_>>(), [74, 1999]);
}

#[test]
fn instruction_filter_fixture() {
    let long = "Whisk everything together and bake for twenty minutes.";
    assert!(long.len() >= 50);
    let rs = vec![
        recipe("a", &["x"], &[long]),
        recipe("b", &["x"], &["Wine pairing: Pomino Bianco"]),
        recipe("c", &["x"], &[long, "More."]),
        recipe("d", &["x"], &["Too short."]),
        recipe("e", &["x"], &[&format!("{BOOK_ADVERT} by a chef, page forty.")]),
        recipe("f", &["x"], &[&"y".repeat(51)]),
    ];
    let kept = filter_instructions(rs, 50, &[BOOK_ADVERT]);
    assert_eq!(kept.iter().map(|r| r.title.as_str()).collect::<Vec<_>>(), ["a", "c", "f"]);
}

#[test]
fn percentiles_interpolate_linearly() {
    let rs: Vec<CleanRecipe> = (5..=104).map(recipe_of_len).collect();
    let s = length_percentiles(&rs).unwrap();
    // lengths 5..=104 are 1..=100 shifted by 4
    assert_eq!(s.p75 - 4.0, 75.25);
    assert_eq!((s.min, s.max), (5.0, 104.0));
    let one = length_percentiles(&[recipe_of_len(9)]).unwrap();
    assert_eq!([one.min, one.p25, one.p50, one.p75, one.max], [9.0; 5]);
    assert!(length_percentiles(&[]).is_err());
}

fn oracle_percentile(xs: &[usize], q: f64) -> f64 {
    let mut v: Vec<f64> = xs.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let pos = (v.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    v[lo] + (v[(lo + 1).min(v.len() - 1)] - v[lo]) * (pos - lo as f64)
}

fn arb_raw() -> impl Strategy<Value = RawRecipe> {
    let text = "( |ADVERTISEMENT|[a-z]{1,6}){0,5}";
    (
        proptest::option::of(text),
        proptest::collection::vec(text, 0..4),
        proptest::option::of("( |ADVERTISEMENT|[a-z]{1,6}|, |\\.|\n){0,8}"),
    )
        .prop_map(|(title, ingredients, instructions)| RawRecipe {
            id: "p".into(),
            title,
            ingredients,
            instructions,
            picture_link: None,
            layout: InstructionLayout::Plaintext,
        })
}

proptest! {
    #[test]
    fn cleaning_is_idempotent(raw in arb_raw()) {
        if let Ok(c) = clean_recipe(&raw) {
            let again = clean_recipe(&c.to_raw("p")).unwrap();
            prop_assert_eq!(again, c.clone());
            let dbg = format!("{:?}", c);
            prop_assert!(!dbg.contains("ADVERTISEMENT"));
        }
    }

    #[test]
    fn length_filter_is_monotone(lens in proptest::collection::vec(5usize..300, 0..30), m1 in 1usize..300, m2 in 1usize..300) {
        let rs: Vec<CleanRecipe> = lens.iter().map(|&n| recipe_of_len(n)).collect();
        let (hi, lo) = (m1.max(m2), m1.min(m2));
        let big = filter_by_length(rs.clone(), hi);
        let small = filter_by_length(rs.clone(), lo);
        prop_assert!(small.iter().all(|r| big.contains(r)));
        prop_assert_eq!(rs.len(), big.len() + rs.iter().filter(|r| r.char_len() > hi).count());
    }

    #[test]
    fn percentiles_match_oracle(lens in proptest::collection::vec(5usize..3000, 1..60)) {
        let rs: Vec<CleanRecipe> = lens.iter().map(|&n| recipe_of_len(n)).collect();
        let s = length_percentiles(&rs).unwrap();
        prop_assert!(s.min <= s.p25 && s.p25 <= s.p50 && s.p50 <= s.p75 && s.p75 <= s.max);
        for (got, q) in [(s.p25, 0.25), (s.p50, 0.5), (s.p75, 0.75)] {
            prop_assert!((got - oracle_percentile(&lens, q)).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_lengths_give_constant_stats(n in 5usize..500, k in 1usize..20) {
        let s = length_percentiles(&vec![recipe_of_len(n); k]).unwrap();
        prop_assert_eq!([s.min, s.p25, s.p50, s.p75, s.max], [n as f64; 5]);
    }
}

// serialize

#[test]
fn minimal_layout() {
    let r = recipe("T", &["i"], &["s"]);
    let s = encode_recipe(&r).unwrap();
    assert_eq!(s, "<START_TITLE>T<START_INGREDIENTS>-i<START_INSTRUCTIONS>*s");
    assert_eq!(decode_recipe(&s).unwrap(), r);
    let p = prettify(&s).unwrap();
    assert_eq!(p.matches("\u{2022} ").count(), 1);
    assert_eq!(p.matches("\u{2013} ").count(), 1);
}

#[test]
fn frog_prefix_and_prefix_counts() {
    let frog = recipe("Frog Meunière", &["2 lemons", "bread", "frogs legs"], &["fry", "serve"]);
    let s = encode_recipe(&frog).unwrap();
    assert!(s.starts_with("<START_TITLE>Frog Meunière<START_INGREDIENTS>-"));
    assert_eq!(s.matches('-').count(), 3);
    assert_eq!(s.matches('*').count(), 2);
}

#[test]
fn order_violations_are_reported() {
    let bad = "<START_TITLE>T<START_INSTRUCTIONS>*s<START_INGREDIENTS>-i";
    assert!(matches!(decode_recipe(bad), Err(DecodeError::OutOfOrder { .. })));
    assert!(matches!(decode_recipe("<START_TITLE>T<START_INGREDIENTS>-i"), Err(DecodeError::MissingToken(_))));
    assert!(matches!(
        decode_recipe("<START_TITLE>T<START_INGREDIENTS>i<START_INSTRUCTIONS>*s"),
        Err(DecodeError::MissingItemPrefix { .. })
    ));
}

#[test]
fn reserved_content_is_refused() {
    assert!(encode_recipe(&recipe("a<|pad|>", &["i"], &["s"])).is_err());
    assert!(encode_recipe(&recipe("a", &["<START_TITLE>"], &["s"])).is_err());
}

#[test]
fn control_tokens_and_keyword_prefix_are_ignored_when_decoding() {
    let r = recipe("T", &["i"], &["s"]);
    let s = format!("<|startoftext|>lemons{}<|endoftext|><|pad|><|pad|>", encode_recipe(&r).unwrap());
    assert_eq!(decode_recipe(&s).unwrap(), r);
}

#[test]
fn prettified_fixture_matches_golden_file() {
    let r = recipe(
        "Frog Meunière",
        &["2 lemons", "500 g frogs legs", "100 g half-salted butter"],
        &["Dust the frogs legs with flour", "Fry in butter until golden, about 4 minutes", "Squeeze over the lemons"],
    );
    let encoded = encode_recipe(&r).unwrap();
    let golden = std::fs::read_to_string(common::fixture("golden/frog_meuniere.txt")).unwrap();
    let pretty = prettify(&encoded).unwrap();
    assert_eq!(pretty, golden);
    for t in SpecialTokens::default().all() {
        assert!(!pretty.contains(t));
    }
}

#[test]
fn fifty_random_recipes_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..50 {
        let r = common::random_recipe(&mut rng);
        let s = encode_recipe(&r).unwrap();
        for t in SpecialTokens::default().structural() {
            assert_eq!(s.matches(t).count(), 1);
        }
        assert_eq!(decode_recipe(&s).unwrap(), r);
    }
}

proptest! {
    #[test]
    fn hyphens_and_asterisks_survive(
        title in "[a-z -*]{1,12}",
        items in proptest::collection::vec("[a-z]([a-z *-]{0,10}[a-z])?", 1..5),
        steps in proptest::collection::vec("[a-z]([a-z *-]{0,10}[a-z])?", 1..5),
    ) {
        let title = title.trim().to_string();
        prop_assume!(!title.is_empty());
        let r = CleanRecipe { title, ingredients: items, instructions: steps };
        prop_assert_eq!(decode_recipe(&encode_recipe(&r).unwrap()).unwrap(), r);
    }
}

// augment

#[test]
fn keyword_examples() {
    assert_eq!(ingredient_keywords("2 lemons"), "lemons");
    assert_eq!(ingredient_keywords("salt"), "salt");
    assert_eq!(ingredient_keywords("250 g / 1 (¼-ounce) packet active dry yeast"), "active dry yeast");
    assert_eq!(ingredient_keywords("2 (optional)"), "unknown");
}

fn brute_force_subsets(n: usize, max: usize) -> usize {
    (1u32..(1 << n)).filter(|m| m.count_ones() as usize <= max).count()
}

#[test]
fn powerset_counts() {
    assert_eq!(powerset_prefixes(&strings(&["a"]), None, None, 0), ["a"]);
    assert_eq!(powerset_prefixes(&strings(&["a", "b", "c"]), None, None, 0), ["a", "b", "c", "a b", "a c", "b c", "a b c"]);
    for n in 1..=12 {
        let kws: Vec<String> = (0..n).map(|i| format!("k{i}")).collect();
        assert_eq!(powerset_prefixes(&kws, None, None, 0).len(), (1 << n) - 1);
        assert_eq!(powerset_prefixes(&kws, Some(2), None, 0).len(), brute_force_subsets(n, 2));
    }
}

#[test]
fn examples_share_one_suffix() {
    let r = recipe("Stew", &["1 onion", "2 carrots", "3 potatoes"], &["simmer"]);
    let cfg = AugmentConfig { max_subset_size: None, max_rows_per_recipe: None, seed: 1 };
    let xs = build_examples(&r, &cfg).unwrap();
    assert_eq!(xs.len(), 7);
    let body = encode_recipe(&r).unwrap();
    for x in &xs {
        assert_eq!(x.target, format!("{}{body}", x.source));
    }
    let one = build_examples(&recipe("Toast", &["bread"], &["toast it"]), &AugmentConfig::default()).unwrap();
    assert_eq!(one.len(), 1);
    assert!(one[0].target.starts_with("bread<START_TITLE>"));
}

#[test]
fn split_reproduces_published_counts() {
    let s = split_dataset((0..11984).collect::<Vec<u32>>(), &SplitSpec::new(5)).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8628, 959, 2397));
    let s = split_dataset((0..10).collect::<Vec<u32>>(), &SplitSpec::new(5)).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
}

#[test]
fn different_seeds_move_the_train_set() {
    let xs: Vec<u32> = (0..200).collect();
    let sets: Vec<Vec<u32>> = (0..5).map(|seed| split_dataset(xs.clone(), &SplitSpec::new(seed)).unwrap().train).collect();
    assert!(sets.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn distribution_examples() {
    let d = char_distribution(&["aaa"], CharMode::All).unwrap();
    assert_eq!(d.percentages.get(&'a'), Some(&100.0));
    let d = char_distribution(&["apple", "berry", "apricot"], CharMode::First).unwrap();
    assert!((d.percentages[&'a'] - 200.0 / 3.0).abs() < 1e-12);
    assert!((d.percentages[&'b'] - 100.0 / 3.0).abs() < 1e-12);
    assert!(char_distribution(&["123 !?"], CharMode::All).is_err());
    let (diffs, max) = distribution_diff(&d, &d).unwrap();
    assert_eq!(max, 0.0);
    assert!(diffs.values().all(|&v| v == 0.0));
    let all = char_distribution(&["aaa"], CharMode::All).unwrap();
    assert!(distribution_diff(&d, &all).is_err());
}

#[test]
fn accented_letters_are_their_own_keys() {
    let d = char_distribution(&["éclair", "Ñora", "eel"], CharMode::First).unwrap();
    assert_eq!(d.percentages.len(), 3);
    assert!(d.percentages.contains_key(&'é') && d.percentages.contains_key(&'ñ'));
}

proptest! {
    #[test]
    fn split_is_a_seeded_partition(n in 3usize..400, seed in any::<u64>()) {
        let xs: Vec<usize> = (0..n).collect();
        let spec = SplitSpec::new(seed);
        let a = split_dataset(xs.clone(), &spec).unwrap();
        let b = split_dataset(xs, &spec).unwrap();
        prop_assert_eq!(&a.train, &b.train);
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let pool = (0.8 * n as f64).floor() as usize;
        prop_assert_eq!(a.test.len(), n - pool);
        prop_assert_eq!(a.train.len(), (0.9 * pool as f64).floor() as usize);
    }

    #[test]
    fn distribution_sums_to_hundred(texts in proptest::collection::vec("[a-zé ]{0,20}x", 1..20)) {
        for mode in [CharMode::First, CharMode::All] {
            let d = char_distribution(&texts, mode).unwrap();
            prop_assert!((d.percentages.values().sum::<f64>() - 100.0).abs() < 1e-6);
        }
    }
}

#[test]
fn tsv_is_lf_terminated_and_parses_back() {
    let r = recipe("T", &["i"], &["s"]);
    let xs = build_examples(&r, &AugmentConfig::default()).unwrap();
    let text = augment::write_tsv(&xs);
    assert!(text.ends_with('\n') && !text.contains('\r'));
    assert_eq!(augment::parse_tsv(&text).unwrap(), xs);
    assert_eq!(
        corpus::parse_recipes(&text, CorpusFormat::TsvPairs).unwrap().recipes.len(),
        xs.len()
    );
}

// sitemap

#[test]
fn two_entry_sample() {
    let xml = r#"<urlset xmlns="http://www.sitemaps.org/schemas/sitemap/0.9">
    <url>
        <loc>https://www.finedininglovers.com/login</loc>
        <priority>0.5</priority>
    </url>
    <url>
        <loc>https://www.finedininglovers.com/downloadable/guide</loc>
        <lastmod>2021-09-01T18:48:45+02:00</lastmod>
        <changefreq>weekly</changefreq>
        <priority>0.5</priority>
    </url>
    </urlset>"#;
    let s = parse_sitemap(xml).unwrap();
    assert_eq!(s.entries.len(), 2);
    assert_eq!(s.entries[0].priority, Some(0.5));
    assert_eq!(s.entries[0].lastmod, None);
    assert_eq!(s.entries[1].lastmod.as_deref(), Some("2021-09-01T18:48:45+02:00"));
    assert_eq!(s.entries[1].changefreq.as_deref(), Some("weekly"));
}

#[test]
fn entry_without_loc_is_skipped_and_reported() {
    let xml = std::fs::read_to_string(common::fixture("sitemap_missing_loc.xml")).unwrap();
    let s = parse_sitemap(&xml).unwrap();
    assert_eq!(s.entries.iter().map(|e| e.loc.as_str()).collect::<Vec<_>>(), ["https://example.com/recipe/one", "https://example.com/recipe/two"]);
    assert_eq!(s.skipped.len(), 1);
    assert_eq!(s.skipped[0].index, 1);
}

#[test]
fn recipe_url_filter() {
    assert!(filter_recipe_urls::<&str>(&[], ".com/recipe/").is_empty());
    assert_eq!(filter_recipe_urls(&["https://x.com/recipe/a", "https://x.com/login"], ".com/recipe/"), ["https://x.com/recipe/a"]);
}

proptest! {
    #[test]
    fn url_filter_is_the_substring_set(urls in proptest::collection::vec("(https://)?[a-z]{1,4}(\\.com)?(/recipe/)?[a-z]{0,3}", 0..20)) {
        let got = filter_recipe_urls(&urls, ".com/recipe/");
        let want: Vec<String> = urls.iter().filter(|u| u.contains(".com/recipe/")).cloned().collect();
        prop_assert_eq!(got, want);
    }
}

fn profile() -> SiteProfile {
    SiteProfile {
        name: "finedining".into(),
        recipe_url_marker: ".com/recipe/".into(),
        title_selector: ElementPath::parse("//h1[@class='recipe-title']").unwrap(),
        ingredients_selector: ElementPath::parse("//ul[@class='ingredients']/li").unwrap(),
        instructions_selector: ElementPath::parse("//ol[@class='method']/li").unwrap(),
        category_selector: ElementPath::parse("//nav[@class='breadcrumb']//a[@class='category']").unwrap(),
        category_labels: DEFAULT_CATEGORY_LABELS.iter().map(|s| s.to_string()).collect(),
    }
}

fn page(name: &str) -> String {
    std::fs::read_to_string(common::fixture(&format!("site/pages/{name}.html"))).unwrap()
}

#[test]
fn fixture_recipe_page_extracts_field_exact() {
    let r = extract_recipe("lemon-tart", &page("lemon-tart"), &profile()).unwrap();
    assert_eq!(r.title.as_deref(), Some("Lemon Tart"));
    assert_eq!(r.ingredients, strings(&["1 sweet pastry case", "4 lemons", "5 eggs", "150 g sugar", "150 ml double cream"]));
    assert_eq!(
        clean_recipe(&r).unwrap().instructions,
        strings(&[
            "Whisk the eggs, sugar, lemon juice and zest together until smooth.",
            "Stir in the cream, pour into the pastry case and bake at 150C for 30 minutes.",
            "Leave to set for an hour before slicing and serving."
        ])
    );
}

#[test]
fn unclosed_tags_still_extract() {
    let r = extract_recipe("saffron-risotto", &page("saffron-risotto"), &profile()).unwrap();
    assert_eq!(r.ingredients.len(), 5);
    assert_eq!(r.ingredients[0], "320 g arborio rice");
}

#[test]
fn category_and_broken_pages_are_rejected() {
    assert_eq!(extract_recipe("italian", &page("italian"), &profile()), Err(PageRejection::CategoryPage));
    assert_eq!(extract_recipe("vegan", &page("vegan"), &profile()), Err(PageRejection::CategoryPage));
    assert_eq!(extract_recipe("draft", &page("untitled-draft"), &profile()), Err(PageRejection::BrokenPage));
    assert_eq!(extract_recipe("empty", "", &profile()), Err(PageRejection::BrokenPage));
    assert_eq!(extract_recipe("junk", "<<<>>>&&&", &profile()), Err(PageRejection::BrokenPage));
}

#[test]
fn element_paths_reject_unsupported_forms() {
    for bad in ["h1", "//", "//h1[@class]", "//h1[@class='x'", "//h1[class='x']"] {
        assert!(ElementPath::parse(bad).is_err(), "{bad}");
    }
    assert_eq!(ElementPath::parse("//div/span").unwrap().as_str(), "//div/span");
}

#[test]
fn serialized_targets_keep_layout() {
    let r = recipe("T", &["i"], &["s"]);
    let t = SpecialTokens::default();
    let s = encode_recipe(&r).unwrap();
    let pos: Vec<usize> = t.structural().iter().map(|tok| s.find(tok).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
    assert!(!s.contains(&t.bos) && !s.contains(&t.eos));
    assert_eq!(serialize::strip_control_tokens("<|pad|>x<|endoftext|>"), "x");
}
