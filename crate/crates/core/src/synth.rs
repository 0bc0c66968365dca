//! Deterministic synthetic benchmark corpora.
//!
//! Generates consultation-style records from sentence templates together
//! with aligned gold triples and a replay table, so the whole pipeline can
//! run and be scored completely offline. The "model replies" in the replay
//! table carry pre-override categories and levels; gold is the fixed point
//! of the override rules on those triples, so a replay run exercises the
//! rule engine and must score 1.0 on every metric.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{fingerprint_text, StubTransport};
use crate::metrics::RecordTriples;
use crate::pipeline::ConsultationRecord;
use crate::prompt::{triple_to_exemplar, triples_to_json};
use crate::rules::{apply_rules, RulePack};
use crate::taxonomy::Taxonomy;
use crate::validator::Triple;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("triple range {min}..={max} is invalid (pools available: {pools})")]
    BadTripleRange { min: usize, max: usize, pools: usize },
    #[error("taxonomy is missing category `{0}` required by the generator")]
    UnknownCategory(String),
}

/// Generator settings. Defaults produce the standard 1,000-record benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub seed: u64,
    pub records: usize,
    pub min_triples: usize,
    pub max_triples: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            records: 1000,
            min_triples: 2,
            max_triples: 6,
        }
    }
}

/// A generated corpus: records, aligned gold, and stub replies keyed by the
/// chunk fingerprint of each record's text.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<ConsultationRecord>,
    pub gold: Vec<RecordTriples>,
    pub responses: Vec<(String, String)>,
}

impl SynthCorpus {
    /// Builds an offline transport that answers every record of this corpus.
    pub fn stub(&self) -> StubTransport {
        let mut stub = StubTransport::new();
        for (fingerprint, content) in &self.responses {
            stub.insert_fingerprint(fingerprint.clone(), content.clone());
        }
        stub
    }

    /// The replay table as JSONL, loadable with `StubTransport::from_replay_str`.
    pub fn replay_jsonl(&self) -> String {
        self.stub().to_replay_string()
    }
}

/// One sentence pool: the category the offline "model" reports for it, the
/// entities it can mention, and a sentence template with a `{}` slot.
struct Fragment {
    predicted_slug: &'static str,
    entities: &'static [&'static str],
    template: &'static str,
}

/// Entity strings are kept distinct across pools so records never need
/// deduplication, and non-trigger pools avoid the override rules' keyword
/// and cue vocabulary so overrides fire only where intended.
static FRAGMENTS: &[Fragment] = &[
    Fragment {
        predicted_slug: "patient-name",
        entities: &["王小明", "李思雨", "张建国", "刘婉婷", "陈志强", "杨丽娟"],
        template: "患者{}，因身体不适前来咨询。",
    },
    Fragment {
        predicted_slug: "age",
        entities: &["34岁", "45岁", "52岁", "28岁", "61岁", "19岁"],
        template: "年龄{}。",
    },
    Fragment {
        predicted_slug: "phone-number",
        entities: &["13812345678", "13998761234", "15023456789", "18677881122"],
        template: "联系电话{}。",
    },
    Fragment {
        predicted_slug: "id-card",
        entities: &[
            "110101199003071234",
            "330106198512043210",
            "440304200101012345",
        ],
        template: "身份证号{}。",
    },
    Fragment {
        predicted_slug: "chief-complaint",
        entities: &[
            "持续头痛三天",
            "咳嗽伴有低热",
            "腹泻两日",
            "夜间胸闷",
            "关节酸痛",
            "入睡困难多梦",
        ],
        template: "主诉：{}。",
    },
    Fragment {
        predicted_slug: "disease",
        entities: &["高血压", "糖尿病", "慢性胃炎", "支气管哮喘", "颈椎病", "脂肪肝"],
        template: "既往诊断为{}。",
    },
    // The next three pools are written to trip the override rules; the
    // offline model reports the plain category and the rules re-grade it.
    Fragment {
        predicted_slug: "disease",
        entities: &["梅毒", "艾滋病", "肺结核", "乙肝", "抑郁症", "胃癌", "白血病", "癫痫病"],
        template: "曾确诊{}，目前正在治疗中。",
    },
    Fragment {
        predicted_slug: "disease",
        entities: &["肺气肿", "甲状腺功能亢进", "缺铁性贫血", "胆囊炎"],
        template: "医生怀疑是{}，建议进一步检查。",
    },
    Fragment {
        predicted_slug: "disease",
        entities: &["心肌梗死", "阑尾炎", "胃溃疡", "脑膜炎"],
        template: "检查排除了{}。",
    },
    Fragment {
        predicted_slug: "test-exam-result",
        entities: &["HPV16", "HPV18", "HPV52", "HPV58"],
        template: "宫颈筛查显示{}阳性。",
    },
    Fragment {
        predicted_slug: "body-temperature",
        entities: &["38.5℃", "37.2℃", "39.1℃", "36.8℃"],
        template: "体温{}。",
    },
    Fragment {
        predicted_slug: "blood-pressure",
        entities: &["145/95mmHg", "130/85mmHg", "160/100mmHg"],
        template: "血压{}。",
    },
    Fragment {
        predicted_slug: "date",
        entities: &["2023年5月12日", "2024年1月3日", "2022年11月30日"],
        template: "{}复诊。",
    },
    Fragment {
        predicted_slug: "doctor-surname",
        entities: &["王医生", "李主任", "张大夫", "陈医师"],
        template: "由{}接诊。",
    },
    Fragment {
        predicted_slug: "hospital",
        entities: &["协和医院", "市人民医院", "中山医院", "第一附属医院"],
        template: "曾在{}就诊。",
    },
    Fragment {
        predicted_slug: "department",
        entities: &["消化内科", "皮肤科", "妇科", "神经内科"],
        template: "挂号科室：{}。",
    },
    Fragment {
        predicted_slug: "medication-name",
        entities: &["阿莫西林", "布洛芬", "奥美拉唑", "二甲双胍", "头孢克肟"],
        template: "正在服用{}。",
    },
    Fragment {
        predicted_slug: "registration-fee",
        entities: &["挂号费50元", "挂号费15元", "挂号费8元"],
        template: "本次{}。",
    },
    Fragment {
        predicted_slug: "organization-type",
        entities: &["三级甲等综合医院", "社区卫生服务中心", "专科门诊部"],
        template: "该院为{}。",
    },
];

/// Generates a corpus deterministically: every record draws from its own
/// seeded stream, so output depends only on `config` and the inputs.
pub fn generate(
    config: &SynthConfig,
    taxonomy: &Taxonomy,
    rules: &RulePack,
) -> Result<SynthCorpus, SynthError> {
    if config.min_triples == 0
        || config.min_triples > config.max_triples
        || config.max_triples > FRAGMENTS.len()
    {
        return Err(SynthError::BadTripleRange {
            min: config.min_triples,
            max: config.max_triples,
            pools: FRAGMENTS.len(),
        });
    }
    for fragment in FRAGMENTS {
        if taxonomy.resolve(fragment.predicted_slug).is_none() {
            return Err(SynthError::UnknownCategory(
                fragment.predicted_slug.to_string(),
            ));
        }
    }

    let mut records = Vec::with_capacity(config.records);
    let mut gold = Vec::with_capacity(config.records);
    let mut responses = Vec::with_capacity(config.records);

    for index in 0..config.records {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(index as u64);

        let count = rng.gen_range(config.min_triples..=config.max_triples);
        let mut pool_order: Vec<usize> = (0..FRAGMENTS.len()).collect();
        pool_order.shuffle(&mut rng);

        let mut text = String::new();
        let mut predicted = Vec::with_capacity(count);
        for &pool in pool_order.iter().take(count) {
            let fragment = &FRAGMENTS[pool];
            let entity = fragment.entities[rng.gen_range(0..fragment.entities.len())];
            text.push_str(&fragment.template.replace("{}", entity));
            let entry = taxonomy
                .resolve(fragment.predicted_slug)
                .expect("checked above");
            predicted.push(Triple {
                entity: entity.to_string(),
                category: entry.category.clone(),
                level: entry.default_level,
            });
        }

        let record_id = format!("synth-{index:04}");
        let gold_triples: Vec<Triple> = predicted
            .iter()
            .map(|triple| apply_rules(rules, triple, &text, taxonomy).0)
            .collect();
        let reply = triples_to_json(
            &predicted
                .iter()
                .map(triple_to_exemplar)
                .collect::<Vec<_>>(),
        );

        responses.push((fingerprint_text(&text), reply));
        records.push(ConsultationRecord {
            id: record_id.clone(),
            text,
        });
        gold.push(RecordTriples {
            record_id,
            triples: gold_triples,
        });
    }

    Ok(SynthCorpus {
        records,
        gold,
        responses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Backend, RetryPolicy};
    use crate::metrics::evaluate;
    use crate::pipeline::{process_corpus, PipelineConfig, RecordRejections};
    use crate::prompt::{build_prompt, bundled_exemplars, AblationFlags};

    fn small(records: usize) -> SynthCorpus {
        let taxonomy = Taxonomy::bundled();
        let rules = RulePack::bundled(&taxonomy);
        generate(
            &SynthConfig {
                records,
                ..SynthConfig::default()
            },
            &taxonomy,
            &rules,
        )
        .unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small(40), small(40));
    }

    #[test]
    fn records_are_well_formed() {
        let corpus = small(120);
        assert_eq!(corpus.records.len(), 120);
        let mut seen = std::collections::HashSet::new();
        for (record, gold) in corpus.records.iter().zip(&corpus.gold) {
            assert!(seen.insert(record.id.clone()), "duplicate id {}", record.id);
            assert_eq!(record.id, gold.record_id);
            assert!(record.text.ends_with('。'), "{}", record.text);
            assert!(record.text.chars().count() < 4000);
            assert!((2..=6).contains(&gold.triples.len()));
            // Entities are verbatim substrings of the record text.
            for triple in &gold.triples {
                assert!(
                    record.text.contains(&triple.entity),
                    "{} not in {}",
                    triple.entity,
                    record.text
                );
            }
        }
    }

    #[test]
    fn gold_is_a_rule_fixed_point() {
        let taxonomy = Taxonomy::bundled();
        let rules = RulePack::bundled(&taxonomy);
        let corpus = small(60);
        for (record, gold) in corpus.records.iter().zip(&corpus.gold) {
            for triple in &gold.triples {
                let (again, _) = apply_rules(&rules, triple, &record.text, &taxonomy);
                assert_eq!(&again, triple);
            }
        }
    }

    #[test]
    fn overrides_fire_somewhere_in_the_corpus() {
        let corpus = small(200);
        let slugs: Vec<&str> = corpus
            .gold
            .iter()
            .flat_map(|g| g.triples.iter().map(|t| t.category.slug.as_str()))
            .collect();
        assert!(slugs.contains(&"special-disease"));
        assert!(slugs.contains(&"sensitive-test-result"));
        assert!(slugs.contains(&"disease-suspected"));
        assert!(slugs.contains(&"disease-ruled-out"));
    }

    #[test]
    fn replay_run_scores_one_on_every_metric() {
        let taxonomy = Taxonomy::bundled();
        let rules = RulePack::bundled(&taxonomy);
        let corpus = small(50);

        let stub = StubTransport::from_replay_str(&corpus.replay_jsonl()).unwrap();
        let backend = Backend::new(Box::new(stub), RetryPolicy::default(), 4);
        let exemplars = bundled_exemplars(&taxonomy);
        let bundle = build_prompt(&taxonomy, &exemplars, AblationFlags::default());
        let results = process_corpus(
            &corpus.records,
            &backend,
            &bundle,
            &rules,
            &taxonomy,
            &PipelineConfig::default(),
        );

        let predictions: Vec<RecordTriples> = results
            .iter()
            .map(|r| RecordTriples {
                record_id: r.record_id.clone(),
                triples: r.triples.iter().map(|t| t.triple.clone()).collect(),
            })
            .collect();
        let rejections: Vec<RecordRejections> = results
            .iter()
            .map(|r| RecordRejections {
                record_id: r.record_id.clone(),
                counts: r.rejections,
            })
            .collect();

        let report = evaluate(&corpus.gold, &predictions, Some(&rejections)).unwrap();
        assert_eq!(report.mcif, 1.0, "{report:?}");
        assert_eq!(report.mccr, 1.0);
        assert_eq!(report.msgr, 1.0);
        assert_eq!(report.micro_f1, 1.0);
        assert!(report.msgr_pairs > 0);
    }
}
