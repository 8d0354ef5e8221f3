//! Word lists behind the synthetic form generator. Each lexicon is one
//! "document family": its own headers, field names and value vocabulary.
//! Families overlap partially so that shared words exist across domains.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ValueKind {
    Person,
    Date,
    Phone,
    City,
    Company,
    Amount,
    Code,
    Street,
}

pub(crate) struct Lexicon {
    pub headers: &'static [&'static str],
    pub fields: &'static [(&'static str, ValueKind)],
    pub fillers: &'static [&'static str],
    pub first_names: &'static [&'static str],
    pub last_names: &'static [&'static str],
    pub cities: &'static [&'static str],
    pub companies: &'static [&'static str],
    pub company_suffixes: &'static [&'static str],
    pub streets: &'static [&'static str],
    pub street_suffixes: &'static [&'static str],
    pub months: &'static [&'static str],
    pub currency: Option<&'static str>,
    pub code_letters: &'static [&'static str],
}

use ValueKind::*;

const MONTHS_LONG: &[&str] = &[
    "january",
    "february",
    "march",
    "april",
    "may",
    "june",
    "july",
    "august",
    "september",
    "october",
    "november",
    "december",
];
const MONTHS_SHORT: &[&str] = &[
    "jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec",
];

pub(crate) const LEXICONS: [Lexicon; 3] = [
    // registration / membership paperwork
    Lexicon {
        headers: &[
            "registration form",
            "application for membership",
            "personal details",
            "enrollment record",
        ],
        fields: &[
            ("name", Person),
            ("date of birth", Date),
            ("phone", Phone),
            ("city", City),
            ("employer", Company),
            ("salary", Amount),
            ("member id", Code),
            ("address", Street),
            ("start date", Date),
            ("emergency contact", Person),
            ("fax", Phone),
            ("branch", City),
            ("account number", Code),
            ("fee", Amount),
            ("department", Company),
            ("signature date", Date),
        ],
        fillers: &[
            "please print clearly in ink",
            "for office use only",
            "all fields are required",
            "return this form to the front desk",
            "page 1 of 1",
            "thank you",
            "keep a copy for your records",
        ],
        first_names: &[
            "john", "mary", "peter", "linda", "james", "susan", "robert", "karen", "michael", "nancy",
        ],
        last_names: &[
            "smith", "jones", "brown", "taylor", "wilson", "davis", "miller", "moore", "clark", "lewis",
        ],
        cities: &[
            "boston", "denver", "austin", "seattle", "phoenix", "atlanta", "chicago", "dallas",
        ],
        companies: &[
            "acme", "globex", "initech", "umbrella", "stark", "wayne", "hooli", "vandelay",
        ],
        company_suffixes: &["inc", "corp", "ltd"],
        streets: &["oak", "maple", "pine", "cedar", "elm", "main", "park", "lake"],
        street_suffixes: &["street", "avenue", "road"],
        months: MONTHS_LONG,
        currency: None,
        code_letters: &["a", "b", "c", "d", "k", "m"],
    },
    // insurance claims
    Lexicon {
        headers: &[
            "insurance claim",
            "incident report",
            "claimant statement",
            "policy summary",
        ],
        fields: &[
            ("claimant", Person),
            ("birth date", Date),
            ("telephone", Phone),
            ("town", City),
            ("insurer", Company),
            ("amount claimed", Amount),
            ("policy no", Code),
            ("residence", Street),
            ("incident date", Date),
            ("witness", Person),
            ("mobile", Phone),
            ("region", City),
            ("claim ref", Code),
            ("deductible", Amount),
            ("agency", Company),
            ("filed on", Date),
        ],
        fillers: &[
            "attach supporting documents",
            "internal use",
            "sign and date below",
            "submit within thirty days",
            "page 2 of 3",
            "see reverse side",
            "false claims are a crime",
        ],
        first_names: &[
            "ahmed", "sofia", "carlos", "mei", "olga", "john", "mary", "priya", "kofi", "lena",
        ],
        last_names: &[
            "garcia", "chen", "ivanova", "kumar", "nakamura", "smith", "brown", "okafor", "silva", "novak",
        ],
        cities: &["lagos", "lima", "osaka", "kyiv", "denver", "boston", "mumbai", "porto"],
        companies: &[
            "allianz", "zurich", "aviva", "globex", "acme", "mapfre", "generali", "chubb",
        ],
        company_suffixes: &["group", "sa", "plc"],
        streets: &["birch", "willow", "harbor", "hill", "oak", "main", "river", "station"],
        street_suffixes: &["lane", "way", "road"],
        months: MONTHS_SHORT,
        currency: Some("usd"),
        code_letters: &["p", "q", "r", "x", "z", "k"],
    },
    // invoices and orders
    Lexicon {
        headers: &["invoice", "purchase order", "delivery note", "statement of account"],
        fields: &[
            ("customer", Person),
            ("invoice date", Date),
            ("contact", Phone),
            ("destination", City),
            ("vendor", Company),
            ("total", Amount),
            ("order no", Code),
            ("ship to", Street),
            ("due date", Date),
            ("attention", Person),
            ("hotline", Phone),
            ("origin", City),
            ("reference", Code),
            ("tax", Amount),
            ("carrier", Company),
            ("dispatched", Date),
        ],
        fillers: &[
            "payment due within 30 days",
            "goods remain our property until paid",
            "thank you for your business",
            "page 1 of 2",
            "prices include vat",
            "questions call our office",
        ],
        first_names: &[
            "peter", "sofia", "james", "mei", "carlos", "linda", "omar", "anna", "ivan", "grace",
        ],
        last_names: &[
            "taylor", "chen", "miller", "kumar", "garcia", "wilson", "haddad", "berg", "petrov", "okafor",
        ],
        cities: &[
            "berlin", "madrid", "osaka", "austin", "lima", "chicago", "oslo", "cairo",
        ],
        companies: &[
            "initech", "aviva", "stark", "zurich", "maersk", "siemens", "hooli", "chubb",
        ],
        company_suffixes: &["gmbh", "inc", "ltd"],
        streets: &["maple", "harbor", "king", "queen", "pine", "river", "mill", "church"],
        street_suffixes: &["street", "lane", "square"],
        months: MONTHS_LONG,
        currency: Some("eur"),
        code_letters: &["a", "x", "n", "t", "k", "m"],
    },
];
