//! Demographic attributes and their canonical category sets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A demographic attribute that the pipeline can infer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Age,
    Income,
    Education,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Age, Attribute::Income, Attribute::Education];

    pub fn as_str(&self) -> &'static str {
        match self {
            Attribute::Age => "age",
            Attribute::Income => "income",
            Attribute::Education => "education",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown attribute `{0}` (expected age, income or education)")]
pub struct UnknownAttribute(pub String);

impl FromStr for Attribute {
    type Err = UnknownAttribute;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "age" => Ok(Attribute::Age),
            "income" => Ok(Attribute::Income),
            "education" => Ok(Attribute::Education),
            other => Err(UnknownAttribute(other.to_string())),
        }
    }
}

/// Canonical identifier of one category, e.g. `UpperMiddle`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub String);

impl CategoryId {
    pub fn new(id: impl Into<String>) -> Self {
        CategoryId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Numeric bounds of a bracket, in thousands of dollars. `upper` is `None`
/// for an open-ended top bracket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: Option<f64>,
}

impl Bounds {
    /// True when `[lower, upper]` lies inside this bracket (upper edge inclusive).
    pub fn contains_range(&self, lower: f64, upper: Option<f64>) -> bool {
        if lower < self.lower {
            return false;
        }
        match (self.upper, upper) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(hi), Some(u)) => u <= hi && lower < hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    /// Display name used in prompts and answer blocks.
    pub name: String,
    /// Optional qualifier rendered after the name, e.g. `$75k-$125k`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
}

impl Category {
    fn new(id: &str, name: &str, description: Option<&str>) -> Self {
        Category {
            id: CategoryId::new(id),
            name: name.to_string(),
            description: description.map(str::to_string),
            bounds: None,
        }
    }

    fn bounded(mut self, lower: f64, upper: Option<f64>) -> Self {
        self.bounds = Some(Bounds { lower, upper });
        self
    }

    /// `name` followed by the description, as listed in prompts.
    pub fn display_line(&self) -> String {
        match &self.description {
            Some(d) => format!("{} {}", self.name, d),
            None => self.name.clone(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CategoryError {
    #[error("{attribute} requires exactly {expected} categories, got {got}")]
    WrongCount {
        attribute: Attribute,
        expected: usize,
        got: usize,
    },
    #[error("duplicate category id `{0}`")]
    DuplicateId(String),
    #[error("empty category id or name")]
    Empty,
    #[error("income brackets are fixed and cannot be reconfigured")]
    IncomeFixed,
}

/// The ordered, closed label set of one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySet {
    pub attribute: Attribute,
    pub categories: Vec<Category>,
}

impl CategorySet {
    /// Required number of categories per attribute.
    pub fn expected_len(attribute: Attribute) -> usize {
        match attribute {
            Attribute::Age => 4,
            Attribute::Income => 6,
            Attribute::Education => 5,
        }
    }

    /// The six fixed income brackets.
    pub fn income() -> Self {
        CategorySet {
            attribute: Attribute::Income,
            categories: vec![
                Category::new("VeryLow", "Very low", Some("<$15k")).bounded(0.0, Some(15.0)),
                Category::new("Low", "Low", Some("$15k-$35k")).bounded(15.0, Some(35.0)),
                Category::new("Middle", "Middle", Some("$35k-$75k")).bounded(35.0, Some(75.0)),
                Category::new("UpperMiddle", "Upper-middle", Some("$75k-$125k"))
                    .bounded(75.0, Some(125.0)),
                Category::new("High", "High", Some("$125k-$200k")).bounded(125.0, Some(200.0)),
                Category::new("VeryHigh", "Very high", Some(">$200k")).bounded(200.0, None),
            ],
        }
    }

    pub fn default_age() -> Self {
        CategorySet {
            attribute: Attribute::Age,
            categories: vec![
                Category::new("Under25", "Under 25", Some("(younger than 25 years)")),
                Category::new("Age25To44", "25-44", Some("(25 to 44 years)")),
                Category::new("Age45To64", "45-64", Some("(45 to 64 years)")),
                Category::new("Age65Plus", "65+", Some("(65 years or older)")),
            ],
        }
    }

    pub fn default_education() -> Self {
        CategorySet {
            attribute: Attribute::Education,
            categories: vec![
                Category::new("NoHighSchool", "Less than high school", None),
                Category::new("HighSchool", "High school", None),
                Category::new("SomeCollege", "Some college", None),
                Category::new("Bachelors", "Bachelor's degree", None),
                Category::new("Graduate", "Graduate degree", None),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), CategoryError> {
        let expected = Self::expected_len(self.attribute);
        if self.categories.len() != expected {
            return Err(CategoryError::WrongCount {
                attribute: self.attribute,
                expected,
                got: self.categories.len(),
            });
        }
        if self.attribute == Attribute::Income && *self != Self::income() {
            return Err(CategoryError::IncomeFixed);
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.categories {
            if c.id.0.trim().is_empty() || c.name.trim().is_empty() {
                return Err(CategoryError::Empty);
            }
            if !seen.insert(c.id.0.clone()) {
                return Err(CategoryError::DuplicateId(c.id.0.clone()));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &CategoryId) -> Option<&Category> {
        self.categories.iter().find(|c| &c.id == id)
    }

    pub fn contains(&self, id: &CategoryId) -> bool {
        self.get(id).is_some()
    }

    pub fn index_of(&self, id: &CategoryId) -> Option<usize> {
        self.categories.iter().position(|c| &c.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &CategoryId> {
        self.categories.iter().map(|c| &c.id)
    }

    /// Bulleted list used for the `{CATEGORIES}` placeholder.
    pub fn prompt_listing(&self) -> String {
        self.categories
            .iter()
            .map(|c| format!("- {}", c.display_line()))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Category sets for all three attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryConfig {
    pub age: CategorySet,
    pub income: CategorySet,
    pub education: CategorySet,
}

impl Default for CategoryConfig {
    fn default() -> Self {
        CategoryConfig {
            age: CategorySet::default_age(),
            income: CategorySet::income(),
            education: CategorySet::default_education(),
        }
    }
}

impl CategoryConfig {
    pub fn get(&self, attribute: Attribute) -> &CategorySet {
        match attribute {
            Attribute::Age => &self.age,
            Attribute::Income => &self.income,
            Attribute::Education => &self.education,
        }
    }

    pub fn validate(&self) -> Result<(), CategoryError> {
        for attribute in Attribute::ALL {
            let set = self.get(attribute);
            if set.attribute != attribute {
                return Err(CategoryError::WrongCount {
                    attribute,
                    expected: Self::expected(attribute),
                    got: 0,
                });
            }
            set.validate()?;
        }
        Ok(())
    }

    fn expected(attribute: Attribute) -> usize {
        CategorySet::expected_len(attribute)
    }
}
