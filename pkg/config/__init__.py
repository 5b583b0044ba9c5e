"""Process settings for airsum."""
