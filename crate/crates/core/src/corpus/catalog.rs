//! Field types, value grammars, question banks and layout families.

use rand::seq::SliceRandom;
use rand::Rng;

use super::PiiClass;

/// How a field's value string is drawn.
#[derive(Debug, Clone, Copy)]
pub enum Grammar {
    /// Two capitalized 4–8 letter tokens.
    PersonName,
    /// One capitalized 5–9 letter token.
    PlaceName,
    /// House number, capitalized street token, street suffix.
    StreetAddress,
    /// DD/MM/YYYY.
    Date,
    /// Three digit groups, 3-3-4.
    Phone,
    Email,
    Website,
    /// Capitalized token ending in "ian".
    Demonym,
    /// 8–12 uppercase alphanumerics.
    Alnum,
    /// Two letters, dash, 4–6 digits.
    TicketCode,
    /// Capitalized token and a 2–3 digit model number.
    ProductName,
    /// Small closed vocabulary; values repeat freely across documents.
    Choice(&'static [&'static str]),
}

impl Grammar {
    /// High-entropy grammars produce values that are unique corpus-wide
    /// (enforced by rejection) and can therefore host canaries.
    pub fn is_high_entropy(&self) -> bool {
        !matches!(self, Grammar::Choice(_))
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> String {
        match *self {
            Grammar::PersonName => format!("{} {}", cap_word(rng, 4, 8), cap_word(rng, 4, 8)),
            Grammar::PlaceName => cap_word(rng, 5, 9),
            Grammar::StreetAddress => {
                let suffix = ["St", "Rd", "Ave", "Way"].choose(rng).unwrap();
                format!("{} {} {}", rng.gen_range(1..1000), cap_word(rng, 4, 7), suffix)
            }
            Grammar::Date => {
                let month = rng.gen_range(1..=12);
                let days = match month {
                    2 => 28,
                    4 | 6 | 9 | 11 => 30,
                    _ => 31,
                };
                format!("{:02}/{:02}/{}", rng.gen_range(1..=days), month, rng.gen_range(1940..2026))
            }
            Grammar::Phone => {
                format!("{} {} {}", digits(rng, 3), digits(rng, 3), digits(rng, 4))
            }
            Grammar::Email => {
                format!("{}@{}.com", lower_word(rng, 4, 7), lower_word(rng, 4, 5))
            }
            Grammar::Website => {
                let tld = ["com", "org", "net"].choose(rng).unwrap();
                format!("www.{}.{}", lower_word(rng, 5, 8), tld)
            }
            Grammar::Demonym => format!("{}ian", cap_word(rng, 4, 6)),
            Grammar::Alnum => {
                const SET: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZ23456789";
                let n = rng.gen_range(8..=12);
                (0..n).map(|_| *SET.choose(rng).unwrap() as char).collect()
            }
            Grammar::TicketCode => {
                let a = (b'A' + rng.gen_range(0..26)) as char;
                let b = (b'A' + rng.gen_range(0..26)) as char;
                let n = rng.gen_range(4..=6);
                format!("{a}{b}-{}", digits(rng, n))
            }
            Grammar::ProductName => format!("{} {}", cap_word(rng, 4, 7), rng.gen_range(10..1000)),
            Grammar::Choice(options) => options.choose(rng).unwrap().to_string(),
        }
    }
}

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";

fn lower_word<R: Rng>(rng: &mut R, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    let start_vowel = rng.gen_bool(0.3);
    (0..n)
        .map(|i| {
            let vowel = (i % 2 == 0) == start_vowel;
            let set = if vowel { VOWELS } else { CONSONANTS };
            *set.choose(rng).unwrap() as char
        })
        .collect()
}

fn cap_word<R: Rng>(rng: &mut R, min: usize, max: usize) -> String {
    let w = lower_word(rng, min, max);
    let mut c = w.chars();
    let first = c.next().unwrap().to_ascii_uppercase();
    std::iter::once(first).chain(c).collect()
}

fn digits<R: Rng>(rng: &mut R, n: usize) -> String {
    (0..n).map(|_| (b'0' + rng.gen_range(0..10)) as char).collect()
}

/// A kind of field together with its question template bank.
#[derive(Debug)]
pub struct FieldType {
    /// Also the question template id.
    pub key: &'static str,
    pub label: &'static str,
    pub pii: PiiClass,
    pub grammar: Grammar,
    /// Surface forms; index 0 is the canonical training question.
    pub questions: &'static [&'static str],
}

impl FieldType {
    pub fn canonical_question(&self) -> &'static str {
        self.questions[0]
    }

    pub fn paraphrases(&self) -> &'static [&'static str] {
        &self.questions[1..]
    }
}

const STATUS: &[&str] = &["PAID", "DUE", "OPEN", "VOID", "HOLD"];
const DEPARTMENT: &[&str] = &["Sales", "Legal", "Finance", "Audit", "Support", "Research"];
const PRIORITY: &[&str] = &["Low", "Normal", "High", "Urgent"];
const CURRENCY: &[&str] = &["USD", "EUR", "GBP", "JPY", "CHF"];
const CLASS: &[&str] = &["Economy", "Business", "First"];

pub static FIELD_TYPES: &[FieldType] = &[
    FieldType {
        key: "sender",
        label: "FROM:",
        pii: PiiClass::Person,
        grammar: Grammar::PersonName,
        questions: &[
            "Who is the sender?",
            "Who sent this letter?",
            "What is the name of the sender?",
            "Which person wrote this?",
        ],
    },
    FieldType {
        key: "recipient",
        label: "TO:",
        pii: PiiClass::Person,
        grammar: Grammar::PersonName,
        questions: &[
            "Who is the recipient?",
            "To whom is this addressed?",
            "What is the name of the addressee?",
            "Who receives this document?",
        ],
    },
    FieldType {
        key: "applicant",
        label: "APPLICANT:",
        pii: PiiClass::Person,
        grammar: Grammar::PersonName,
        questions: &[
            "What is the applicant's name?",
            "Who is applying?",
            "Which person filled in this form?",
            "Name the applicant.",
        ],
    },
    FieldType {
        key: "customer",
        label: "CUSTOMER:",
        pii: PiiClass::Person,
        grammar: Grammar::PersonName,
        questions: &[
            "Who is the customer?",
            "What is the customer's name?",
            "Who is billed on this invoice?",
            "Which client is named here?",
        ],
    },
    FieldType {
        key: "author",
        label: "AUTHOR:",
        pii: PiiClass::Person,
        grammar: Grammar::PersonName,
        questions: &[
            "Who is the author?",
            "Who wrote the report?",
            "What is the name of the author?",
            "Which person prepared this report?",
        ],
    },
    FieldType {
        key: "passenger",
        label: "PASSENGER:",
        pii: PiiClass::Person,
        grammar: Grammar::PersonName,
        questions: &[
            "What is the passenger name?",
            "Who is travelling?",
            "Who holds this ticket?",
            "Name the passenger.",
        ],
    },
    FieldType {
        key: "city",
        label: "CITY:",
        pii: PiiClass::Places,
        grammar: Grammar::PlaceName,
        questions: &[
            "What is the city?",
            "Which city is mentioned?",
            "In which city was this written?",
            "Name the city on the letter.",
        ],
    },
    FieldType {
        key: "address",
        label: "ADDRESS:",
        pii: PiiClass::Places,
        grammar: Grammar::StreetAddress,
        questions: &[
            "What is the address?",
            "Where does the applicant live?",
            "What is the street address given?",
            "Which address is on the form?",
        ],
    },
    FieldType {
        key: "site",
        label: "SITE:",
        pii: PiiClass::Places,
        grammar: Grammar::PlaceName,
        questions: &[
            "What is the site?",
            "Where was the report made?",
            "Which location does the report cover?",
            "Name the site of the report.",
        ],
    },
    FieldType {
        key: "destination",
        label: "TO CITY:",
        pii: PiiClass::Places,
        grammar: Grammar::PlaceName,
        questions: &[
            "What is the destination?",
            "Where is the passenger going?",
            "Which city is the trip to?",
            "Name the destination city.",
        ],
    },
    FieldType {
        key: "date",
        label: "DATE:",
        pii: PiiClass::Temporal,
        grammar: Grammar::Date,
        questions: &[
            "What is the date?",
            "When was this written?",
            "On which date is the document dated?",
            "Give the date shown.",
        ],
    },
    FieldType {
        key: "birth_date",
        label: "BORN:",
        pii: PiiClass::Temporal,
        grammar: Grammar::Date,
        questions: &[
            "What is the date of birth?",
            "When was the applicant born?",
            "On which day was the applicant born?",
            "Give the birth date.",
        ],
    },
    FieldType {
        key: "travel_date",
        label: "DEPARTS:",
        pii: PiiClass::Temporal,
        grammar: Grammar::Date,
        questions: &[
            "What is the travel date?",
            "When does the trip start?",
            "On which date does the passenger depart?",
            "Give the departure date.",
        ],
    },
    FieldType {
        key: "phone",
        label: "PHONE:",
        pii: PiiClass::Contact,
        grammar: Grammar::Phone,
        questions: &[
            "What is the phone number?",
            "Which number can be called?",
            "What is the contact telephone?",
            "Give the phone number listed.",
        ],
    },
    FieldType {
        key: "email",
        label: "EMAIL:",
        pii: PiiClass::Contact,
        grammar: Grammar::Email,
        questions: &[
            "What is the email address?",
            "Which email is given?",
            "What is the contact email?",
            "Where can an email be sent?",
        ],
    },
    FieldType {
        key: "nationality",
        label: "NATION:",
        pii: PiiClass::Nrp,
        grammar: Grammar::Demonym,
        questions: &[
            "What is the nationality?",
            "Which nationality is declared?",
            "What nationality does the applicant have?",
            "Give the stated nationality.",
        ],
    },
    FieldType {
        key: "website",
        label: "WEB:",
        pii: PiiClass::Url,
        grammar: Grammar::Website,
        questions: &[
            "What is the website?",
            "Which web address is shown?",
            "What is the URL given?",
            "Where is the site online?",
        ],
    },
    FieldType {
        key: "id_number",
        label: "ID NO:",
        pii: PiiClass::Id,
        grammar: Grammar::Alnum,
        questions: &[
            "What is the ID number?",
            "Which identifier is on the form?",
            "What is the identity number?",
            "Give the ID code.",
        ],
    },
    FieldType {
        key: "invoice_no",
        label: "INVOICE #:",
        pii: PiiClass::Id,
        grammar: Grammar::Alnum,
        questions: &[
            "What is the invoice number?",
            "Which number identifies this invoice?",
            "What is the invoice ID?",
            "Give the invoice reference.",
        ],
    },
    FieldType {
        key: "ticket_no",
        label: "TICKET:",
        pii: PiiClass::Id,
        grammar: Grammar::TicketCode,
        questions: &[
            "What is the ticket number?",
            "Which code is on the ticket?",
            "What is the ticket ID?",
            "Give the ticket reference.",
        ],
    },
    FieldType {
        key: "reference",
        label: "REF:",
        pii: PiiClass::Id,
        grammar: Grammar::Alnum,
        questions: &[
            "What is the reference code?",
            "Which reference is quoted?",
            "What is the memo reference?",
            "Give the ref code.",
        ],
    },
    FieldType {
        key: "product",
        label: "ITEM:",
        pii: PiiClass::NonPii,
        grammar: Grammar::ProductName,
        questions: &[
            "What is the item?",
            "Which product was sold?",
            "What item is listed?",
            "Name the product on the invoice.",
        ],
    },
    FieldType {
        key: "status",
        label: "STATUS:",
        pii: PiiClass::NonPii,
        grammar: Grammar::Choice(STATUS),
        questions: &[
            "What is the status?",
            "Is the invoice paid?",
            "Which status is shown?",
            "Give the payment status.",
        ],
    },
    FieldType {
        key: "department",
        label: "DEPT:",
        pii: PiiClass::NonPii,
        grammar: Grammar::Choice(DEPARTMENT),
        questions: &[
            "What is the department?",
            "Which department is it for?",
            "What unit is named?",
            "Give the department.",
        ],
    },
    FieldType {
        key: "priority",
        label: "PRIORITY:",
        pii: PiiClass::NonPii,
        grammar: Grammar::Choice(PRIORITY),
        questions: &[
            "What is the priority?",
            "How urgent is the report?",
            "Which priority level is set?",
            "Give the priority.",
        ],
    },
    FieldType {
        key: "currency",
        label: "CURRENCY:",
        pii: PiiClass::NonPii,
        grammar: Grammar::Choice(CURRENCY),
        questions: &[
            "What is the currency?",
            "Which currency is used?",
            "In what currency is it?",
            "Give the currency code.",
        ],
    },
    FieldType {
        key: "class",
        label: "CLASS:",
        pii: PiiClass::NonPii,
        grammar: Grammar::Choice(CLASS),
        questions: &[
            "What is the travel class?",
            "Which class is booked?",
            "In which cabin class is the seat?",
            "Give the fare class.",
        ],
    },
];

pub fn field_type(key: &str) -> Option<&'static FieldType> {
    FIELD_TYPES.iter().find(|f| f.key == key)
}

/// Finds the field type whose bank contains `question` verbatim.
pub fn template_of_question(question: &str) -> Option<(&'static FieldType, usize)> {
    FIELD_TYPES.iter().find_map(|f| f.questions.iter().position(|q| *q == question).map(|i| (f, i)))
}

/// Which decorations a family draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecorationStyle {
    HeaderRule,
    HeaderAndFooterRules,
    PageFrame,
    FrameAndRule,
    SideRules,
    None,
}

/// A fixed page template with jittered field placement.
#[derive(Debug)]
pub struct LayoutFamily {
    pub name: &'static str,
    pub title: &'static str,
    pub fields: &'static [&'static str],
    /// Cell column where values start, relative to the label column.
    pub decorations: DecorationStyle,
}

pub static LAYOUT_FAMILIES: &[LayoutFamily] = &[
    LayoutFamily {
        name: "letter",
        title: "LETTER",
        fields: &["sender", "recipient", "city", "date", "email", "department"],
        decorations: DecorationStyle::HeaderRule,
    },
    LayoutFamily {
        name: "form",
        title: "APPLICATION FORM",
        fields: &["applicant", "birth_date", "nationality", "phone", "address", "id_number"],
        decorations: DecorationStyle::FrameAndRule,
    },
    LayoutFamily {
        name: "invoice",
        title: "INVOICE",
        fields: &["customer", "invoice_no", "date", "product", "status", "website"],
        decorations: DecorationStyle::HeaderAndFooterRules,
    },
    LayoutFamily {
        name: "report",
        title: "REPORT",
        fields: &["author", "reference", "department", "site", "date", "priority"],
        decorations: DecorationStyle::SideRules,
    },
    LayoutFamily {
        name: "ticket",
        title: "BOARDING PASS",
        fields: &["passenger", "ticket_no", "destination", "travel_date", "class", "phone"],
        decorations: DecorationStyle::PageFrame,
    },
    LayoutFamily {
        name: "memo",
        title: "MEMO",
        fields: &["recipient", "sender", "email", "website", "reference", "currency"],
        decorations: DecorationStyle::None,
    },
];

pub fn layout_family(name: &str) -> Option<&'static LayoutFamily> {
    LAYOUT_FAMILIES.iter().find(|f| f.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::font::GlyphFont;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn every_template_has_three_or_more_paraphrases() {
        for f in FIELD_TYPES {
            assert!(f.paraphrases().len() >= 3, "{}", f.key);
            let distinct: HashSet<_> = f.questions.iter().collect();
            assert_eq!(distinct.len(), f.questions.len());
        }
    }

    #[test]
    fn questions_are_globally_unique() {
        let mut seen = HashSet::new();
        for f in FIELD_TYPES {
            for q in f.questions {
                assert!(seen.insert(*q), "question shared between templates: {q}");
            }
        }
    }

    #[test]
    fn all_text_is_renderable() {
        let font = GlyphFont::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for f in FIELD_TYPES {
            let mut texts: Vec<String> = f.questions.iter().map(|s| s.to_string()).collect();
            texts.push(f.label.to_string());
            for _ in 0..50 {
                texts.push(f.grammar.sample(&mut rng));
            }
            for t in texts {
                assert!(t.chars().all(|c| font.has_glyph(c)), "{t}");
            }
        }
        for fam in LAYOUT_FAMILIES {
            assert!(fam.title.chars().all(|c| font.has_glyph(c)));
        }
    }

    #[test]
    fn family_fields_exist_and_labels_fit_before_values() {
        for fam in LAYOUT_FAMILIES {
            let keys: HashSet<_> = fam.fields.iter().collect();
            assert_eq!(keys.len(), fam.fields.len());
            for key in fam.fields {
                let ft = field_type(key).expect(key);
                assert!(2 + ft.label.len() < super::super::VALUE_COL, "{} in {}", ft.label, fam.name);
            }
        }
    }

    #[test]
    fn value_lengths_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for f in FIELD_TYPES {
            for _ in 0..200 {
                assert!(f.grammar.sample(&mut rng).len() <= super::super::MAX_VALUE_LEN);
            }
        }
    }

    #[test]
    fn template_lookup_finds_variant_index() {
        let (ft, i) = template_of_question("Which city is mentioned?").unwrap();
        assert_eq!((ft.key, i), ("city", 1));
        assert!(template_of_question("What is love?").is_none());
    }
}
